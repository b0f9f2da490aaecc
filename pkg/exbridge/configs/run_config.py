import logging
import math
import re

from easydict import EasyDict

from .shared_config import DTYPES, MAX_GRID

__all__ = [
    'ConfigError',
    'RUN_CONFIG_KEYS',
    'make_run_config',
    'parse_run_config',
    'format_run_config',
    'load_run_config',
    'dump_run_config',
    'validate_run_config',
]

RUN_CONFIG_KEYS = (
    # model
    'preset',
    'grid_h',
    'grid_w',
    'channels',
    'width',
    'blocks',
    'heads',
    'token_dim',
    'time_dim',
    'context_tokens',
    # bridge
    'num_train_timesteps',
    'variance_factor',
    'sample_steps',
    # training
    'lr',
    'stage2_lr',
    'weight_decay',
    'batch_size',
    'grad_accum',
    'ema_decay',
    'stage1_steps',
    'stage2_steps',
    'val_every',
    'val_size',
    'plateau_factor',
    'plateau_patience',
    'min_lr',
    'dtype',
    'num_workers',
    'log_every',
    'save_every',
    # data
    'dataset_size',
    'val_fraction',
    'noise_std',
    # run
    'seed',
    'data_dir',
    'out_dir',
)

# '#' opens a comment at line start or after whitespace
_COMMENT = re.compile(r'(?:^|\s)#.*$')


class ConfigError(ValueError):
    pass


def make_run_config(preset='toy-8x8', **overrides):
    r"""
    Build a validated run config from a preset plus keyword overrides.

    Args:
        preset (`str`, *optional*, defaults to 'toy-8x8'):
            Key of `EXB_CONFIGS`.
        overrides:
            Any key of `RUN_CONFIG_KEYS`.

    Returns:
        EasyDict with exactly the keys of `RUN_CONFIG_KEYS`.
    """
    from . import EXB_CONFIGS

    if preset not in EXB_CONFIGS:
        raise ConfigError(
            f"Unsupport preset: {preset}, supported presets are: {', '.join(EXB_CONFIGS)}"
        )
    base = EXB_CONFIGS[preset]
    cfg = EasyDict({k: base[k] for k in RUN_CONFIG_KEYS})
    for key, value in overrides.items():
        if key not in RUN_CONFIG_KEYS:
            raise ConfigError(f"Unknown config key: {key}")
        cfg[key] = _coerce(key, value, type(base[key]))
    validate_run_config(cfg)
    return cfg


def _coerce(key, value, kind):
    if isinstance(value, str):
        text = value.strip()
        try:
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
        except ValueError:
            raise ConfigError(
                f"Cannot parse {key} = {value!r} as {kind.__name__}") from None
        return text
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(
            f"Config key {key} expects {kind.__name__}, got {type(value).__name__}")
    return value


def parse_run_config(text):
    r"""
    Parse flat `key = value` lines. `#` at line start or after whitespace starts a
    comment, so `data_dir = /data/run#1` keeps its value. A `preset` line selects
    the defaults every other key overrides, regardless of its position.
    """
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub('', raw).strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"Line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (u.strip() for u in line.split('=', 1))
        if key not in RUN_CONFIG_KEYS:
            raise ConfigError(f"Line {lineno}: unknown config key: {key}")
        if key in pairs:
            raise ConfigError(f"Line {lineno}: duplicate config key: {key}")
        pairs[key] = value
    preset = pairs.pop('preset', 'toy-8x8')
    return make_run_config(preset, **pairs)


def format_run_config(cfg):
    lines = [f"# {cfg.preset} run config"]
    for key in RUN_CONFIG_KEYS:
        value = cfg[key]
        lines.append(f"{key} = {repr(value) if isinstance(value, float) else value}")
    return '\n'.join(lines) + '\n'


def load_run_config(path):
    with open(path, 'r', encoding='utf-8') as f:
        cfg = parse_run_config(f.read())
    logging.info(f"Loaded run config from {path}")
    return cfg


def dump_run_config(cfg, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_run_config(cfg))
    return path


def validate_run_config(cfg):
    r"""
    Reject every config the pipeline cannot honour, before any work starts.
    """
    missing = [k for k in RUN_CONFIG_KEYS if k not in cfg]
    if missing:
        raise ConfigError(f"Missing config keys: {', '.join(missing)}")
    unknown = [k for k in cfg if k not in RUN_CONFIG_KEYS]
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    for key in ('grid_h', 'grid_w'):
        check(1 <= cfg[key] <= MAX_GRID, f"{key} must be in [1, {MAX_GRID}], got {cfg[key]}")
    for key in ('channels', 'width', 'blocks', 'heads', 'token_dim',
                'context_tokens', 'batch_size', 'grad_accum', 'val_every',
                'val_size', 'dataset_size', 'log_every', 'save_every'):
        check(cfg[key] >= 1, f"{key} must be >= 1, got {cfg[key]}")
    check(cfg.width % cfg.heads == 0,
          f"width ({cfg.width}) must be divisible by heads ({cfg.heads})")
    check(cfg.time_dim >= 2 and cfg.time_dim % 2 == 0,
          f"time_dim must be a positive even number, got {cfg.time_dim}")
    check(cfg.num_train_timesteps >= 2,
          f"num_train_timesteps must be >= 2, got {cfg.num_train_timesteps}")
    check(math.isfinite(cfg.variance_factor) and cfg.variance_factor > 0,
          f"variance_factor must be finite and > 0, got {cfg.variance_factor}")
    check(1 <= cfg.sample_steps <= cfg.num_train_timesteps,
          f"sample_steps must be in [1, {cfg.num_train_timesteps}], got {cfg.sample_steps}")
    for key in ('lr', 'stage2_lr', 'min_lr'):
        check(math.isfinite(cfg[key]) and cfg[key] > 0, f"{key} must be > 0, got {cfg[key]}")
    for key in ('lr', 'stage2_lr'):
        check(cfg.min_lr <= cfg[key],
              f"min_lr ({cfg.min_lr}) must not exceed {key} ({cfg[key]})")
    check(cfg.weight_decay >= 0, f"weight_decay must be >= 0, got {cfg.weight_decay}")
    check(0.0 < cfg.ema_decay < 1.0, f"ema_decay must be in (0, 1), got {cfg.ema_decay}")
    check(0.0 < cfg.plateau_factor < 1.0,
          f"plateau_factor must be in (0, 1), got {cfg.plateau_factor}")
    check(cfg.plateau_patience >= 0,
          f"plateau_patience must be >= 0, got {cfg.plateau_patience}")
    for key in ('stage1_steps', 'stage2_steps', 'num_workers', 'seed'):
        check(cfg[key] >= 0, f"{key} must be >= 0, got {cfg[key]}")
    check(0.0 < cfg.val_fraction < 1.0,
          f"val_fraction must be in (0, 1), got {cfg.val_fraction}")
    check(cfg.noise_std >= 0, f"noise_std must be >= 0, got {cfg.noise_std}")
    check(cfg.dtype in DTYPES,
          f"dtype must be one of {', '.join(DTYPES)}, got {cfg.dtype}")
    for key in ('preset', 'dtype', 'data_dir', 'out_dir'):
        value = cfg[key]
        check(isinstance(value, str) and '\n' not in value
              and _COMMENT.sub('', value).strip() == value,
              f"{key} = {value!r} cannot be written to a config file")
    return cfg
