import pytest


def test_presets_are_valid():
    from exbridge.configs import EXB_CONFIGS, make_run_config
    from exbridge.configs.run_config import RUN_CONFIG_KEYS

    for preset in EXB_CONFIGS:
        cfg = make_run_config(preset)
        assert cfg.preset == preset
        assert tuple(cfg) == RUN_CONFIG_KEYS


def test_round_trip():
    from exbridge.configs import format_run_config, make_run_config, parse_run_config

    cfg = make_run_config('toy-4x4', lr=1e-3, seed=17, variance_factor=0.5, data_dir='data/x')
    text = format_run_config(cfg)
    again = parse_run_config(text)
    assert again == cfg
    assert format_run_config(again) == text


def test_parse_comments_and_types():
    from exbridge.configs import parse_run_config

    cfg = parse_run_config("""
    # toy run
    preset = toy-4x4
    lr = 0.001      # faster
    batch_size = 4
    variance_factor = 2
    out_dir = runs/toy
    """)
    assert cfg.grid_h == 4 and cfg.lr == 1e-3 and cfg.batch_size == 4
    assert isinstance(cfg.variance_factor, float) and cfg.variance_factor == 2.0
    assert cfg.out_dir == 'runs/toy'


@pytest.mark.parametrize("text", [
    "learning_rate = 0.1",
    "lr 0.1",
    "batch_size = four",
    "batch_size = 2\nbatch_size = 3",
    "preset = toy-32x32",
    "heads = 3",
    "sample_steps = 0",
    "sample_steps = 1000",
    "num_train_timesteps = 1",
    "grid_h = 17",
    "dtype = float16",
    "ema_decay = 1.0",
    "val_fraction = 0",
    "stage2_lr = 0",
    "min_lr = 0.01",
])
def test_invalid_configs(text):
    from exbridge.configs import ConfigError, parse_run_config

    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_unknown_override_is_an_error():
    from exbridge.configs import ConfigError, make_run_config

    with pytest.raises(ConfigError):
        make_run_config('toy-8x8', learning_rate=0.1)
    with pytest.raises(ConfigError):
        make_run_config('toy-8x8', batch_size=True)


def test_file_round_trip(tmp_path):
    from exbridge.configs import dump_run_config, load_run_config, make_run_config

    cfg = make_run_config('toy-16x16', stage1_steps=10)
    path = dump_run_config(cfg, str(tmp_path / "config.txt"))
    assert load_run_config(path) == cfg


def test_hash_inside_a_value_round_trips(tmp_path):
    from exbridge.configs import (
        dump_run_config,
        format_run_config,
        load_run_config,
        make_run_config,
        parse_run_config,
    )

    cfg = make_run_config('toy-4x4', data_dir='/data/run#1', out_dir='runs/a#b')
    again = parse_run_config(format_run_config(cfg))
    assert again.data_dir == '/data/run#1' and again.out_dir == 'runs/a#b'
    assert again == cfg
    path = dump_run_config(cfg, str(tmp_path / "config.txt"))
    assert load_run_config(path) == cfg

    cfg = parse_run_config("data_dir = /data/run#2   # trailing comment\n#lr = 0.5\n")
    assert cfg.data_dir == '/data/run#2'
    assert cfg.lr == make_run_config('toy-8x8').lr


@pytest.mark.parametrize("value", ['/data/run #1', '#data', 'runs/a\t#b'])
def test_unwritable_string_values(value):
    from exbridge.configs import ConfigError, make_run_config

    with pytest.raises(ConfigError):
        make_run_config('toy-4x4', out_dir=value)


def test_stage2_lr_is_separate():
    from exbridge.configs import make_run_config

    cfg = make_run_config('toy-8x8', stage2_lr='5e-4')
    assert cfg.lr == 1e-5 and cfg.stage2_lr == 5e-4
