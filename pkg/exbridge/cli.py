import argparse
import logging
import os
import sys
import warnings

warnings.filterwarnings('ignore')

from .configs import (  # noqa: E402
    GRID_CONFIGS,
    ConfigError,
    EXB_CONFIGS,
    load_run_config,
    make_run_config,
)
from .modules.schedule import build_schedule, to_csv  # noqa: E402
from .utils.utils import cache_json  # noqa: E402
from .utils.verify_suites import SUITES  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4


def _validate_args(args):
    # Basic check
    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    if args.command == 'schedule':
        check(args.T >= 2, f"--T must be >= 2, got {args.T}")
        check(args.s > 0, f"--s must be > 0, got {args.s}")
    elif args.command == 'gen-data':
        check(args.n >= 2, f"--n must be >= 2, got {args.n}")
        check(args.grid in GRID_CONFIGS,
              f"Unsupport grid {args.grid}, supported grids are: {', '.join(GRID_CONFIGS)}")
        check(args.channels >= 1, f"--channels must be >= 1, got {args.channels}")
        check(args.noise_std >= 0, f"--noise_std must be >= 0, got {args.noise_std}")
    elif args.command == 'train':
        check(args.config is None or os.path.isfile(args.config),
              f"Config file {args.config} does not exist")
        check(args.resume is None or os.path.isdir(args.resume),
              f"Checkpoint directory {args.resume} does not exist")
        check(args.preset in EXB_CONFIGS,
              f"Unsupport preset {args.preset}, supported presets are: {', '.join(EXB_CONFIGS)}")
        check(args.steps is None or args.steps >= 0, f"--steps must be >= 0, got {args.steps}")
    elif args.command in ('sample', 'evaluate'):
        check(os.path.isfile(os.path.join(args.checkpoint, 'config.txt')),
              f"{args.checkpoint} is not a checkpoint directory")
        check(args.steps is None or args.steps >= 1, f"--steps must be >= 1, got {args.steps}")
        if args.command == 'sample':
            for path in (args.control, args.exemplar):
                check(os.path.isfile(path), f"Input file {path} does not exist")
            check(args.dump_every >= 0, f"--dump_every must be >= 0, got {args.dump_every}")
            check(args.dump_every == 0 or args.trajectory_dir is not None,
                  "--dump_every needs --trajectory_dir")
        else:
            check(os.path.isfile(os.path.join(args.data_dir, 'manifest.json')),
                  f"{args.data_dir} has no manifest.json")
            check(args.n >= 1, f"--n must be >= 1, got {args.n}")


def _parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog='exbridge',
        description="Exemplar-guided Brownian bridge translation on synthetic grids")
    parser.add_argument(
        "--quiet",
        action="store_true",
        default=False,
        help="Only log errors.")
    subparsers = parser.add_subparsers(dest='command', required=True)

    p = subparsers.add_parser('schedule', help="Dump the bridge schedule as CSV.")
    p.add_argument("--T", type=int, default=200, help="Total diffusion steps.")
    p.add_argument("--s", type=float, default=1.0, help="Variance factor.")
    p.add_argument(
        "--out", type=str, default=None, help="CSV path. Writes to stdout when omitted.")

    p = subparsers.add_parser('gen-data', help="Write a synthetic paired dataset.")
    p.add_argument("--n", type=int, default=256, help="Number of samples.")
    p.add_argument(
        "--grid",
        type=str,
        default='8*8',
        choices=list(GRID_CONFIGS.keys()),
        help="Grid size as height*width.")
    p.add_argument("--channels", type=int, default=3, help="Channels per grid cell.")
    p.add_argument("--noise_std", "--noise-std", type=float, default=0.0,
                   help="Pixel noise added to rendered targets and exemplars.")
    p.add_argument("--val_fraction", "--val-fraction", type=float, default=0.125,
                   help="Fraction of samples labelled as validation.")
    p.add_argument("--seed", type=int, default=0, help="Root seed.")
    p.add_argument("--out_dir", "--out-dir", type=str, required=True,
                   help="Output directory.")

    p = subparsers.add_parser('train', help="Two-stage training.")
    p.add_argument("--config", type=str, default=None,
                   help="Run config file of `key = value` lines.")
    p.add_argument(
        "--preset",
        type=str,
        default='toy-8x8',
        choices=list(EXB_CONFIGS.keys()),
        help="Preset used when no --config is given.")
    p.add_argument(
        "--stage",
        type=str,
        default='all',
        choices=['stage1', 'stage2', 'all'],
        help="Stage to train. 'all' runs stage1 then stage2.")
    p.add_argument("--resume", type=str, default=None,
                   help="Checkpoint directory to resume from.")
    p.add_argument("--steps", type=int, default=None,
                   help="Optimizer steps per stage. Defaults to the remaining budget.")
    p.add_argument("--out_dir", "--out-dir", type=str, default=None,
                   help="Output directory. Defaults to the config's out_dir.")
    p.add_argument("--device", type=str, default='cpu', help="Torch device.")

    p = subparsers.add_parser('sample', help="Translate a control grid with an exemplar.")
    p.add_argument("--checkpoint", type=str, required=True, help="Checkpoint directory.")
    p.add_argument("--control", type=str, required=True, help="Control BKT1 file.")
    p.add_argument("--exemplar", type=str, required=True, help="Exemplar BKT1 file.")
    p.add_argument("--steps", type=int, default=None,
                   help="Sampling steps S. Defaults to the config's sample_steps.")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed.")
    p.add_argument("--out", type=str, required=True, help="Output BKT1 file.")
    p.add_argument("--dump_every", "--dump-every", type=int, default=0,
                   help="Dump every k-th intermediate state. 0 disables.")
    p.add_argument("--trajectory_dir", "--trajectory-dir", type=str, default=None,
                   help="Directory for trajectory dumps.")
    p.add_argument("--no_ema", "--no-ema", action="store_true", default=False,
                   help="Sample with the raw weights instead of the EMA weights.")
    p.add_argument("--device", type=str, default='cpu', help="Torch device.")

    p = subparsers.add_parser('verify', help="Run verification suites.")
    p.add_argument(
        "--suite",
        type=str,
        default='all',
        choices=list(SUITES) + ['all'],
        help="Suite to run.")
    p.add_argument("--seed", type=int, default=0, help="Verification seed.")
    p.add_argument("--out", type=str, default=None,
                   help="JSON report path. Writes to stdout when omitted.")

    p = subparsers.add_parser('evaluate', help="Style consistency on held-out triples.")
    p.add_argument("--checkpoint", type=str, required=True, help="Checkpoint directory.")
    p.add_argument("--data_dir", "--data-dir", type=str, required=True,
                   help="Dataset written by gen-data.")
    p.add_argument("--n", type=int, default=64, help="Validation triples to evaluate.")
    p.add_argument("--steps", type=int, default=None, help="Sampling steps S.")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed.")
    p.add_argument("--out", type=str, default=None,
                   help="JSON report path. Writes to stdout when omitted.")
    p.add_argument("--no_ema", "--no-ema", action="store_true", default=False,
                   help="Evaluate the raw weights instead of the EMA weights.")
    p.add_argument("--device", type=str, default='cpu', help="Torch device.")

    return parser.parse_args(argv)


def _init_logging(quiet, stream=None):
    # logging
    if not quiet:
        # set format
        logging.basicConfig(
            level=logging.INFO,
            format="[%(asctime)s] %(levelname)s: %(message)s",
            handlers=[logging.StreamHandler(stream=stream or sys.stdout)],
            force=True)
    else:
        logging.basicConfig(
            level=logging.ERROR,
            handlers=[logging.StreamHandler(stream=sys.stderr)],
            force=True)


def _writes_stdout(args):
    return args.command in ('schedule', 'verify', 'evaluate') and args.out is None


def _emit_json(report, out):
    text = cache_json(report)
    if out is None:
        sys.stdout.write(text + '\n')
    else:
        cache_json(report, out)
        logging.info(f"Saved report to {out}")


def run_schedule(args):
    sched = build_schedule(args.T, args.s)
    if args.out is None:
        to_csv(sched, sys.stdout)
    else:
        to_csv(sched, args.out)
        logging.info(f"Saved schedule for T = {args.T}, s = {args.s} to {args.out}")
    return EXIT_OK


def run_gen_data(args):
    from .utils.synthdata import SynthParams, write_dataset

    h, w = GRID_CONFIGS[args.grid]
    params = SynthParams(h, w, args.channels, args.noise_std)
    logging.info(f"Generating {args.n} samples with {params}")
    write_dataset(args.out_dir, args.n, params, args.seed, args.val_fraction)
    return EXIT_OK


def run_train(args):
    from .trainer import ExbTrainer, NumericAbort, Stage

    if args.resume is not None:
        logging.info(f"Resuming training from {args.resume}")
        trainer = ExbTrainer.from_checkpoint(args.resume, out_dir=args.out_dir, device=args.device)
    else:
        cfg = load_run_config(args.config) if args.config else make_run_config(args.preset)
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        trainer = ExbTrainer(cfg, out_dir=cfg.out_dir, device=args.device)
    logging.info(f"Training job args: {args}")
    logging.info(f"Training run config: {trainer.config}")

    if args.stage == 'all':
        stages = [Stage.STAGE1, Stage.STAGE2]
        # a resumed stage2 run has no stage1 left to train
        if trainer.state.stage == Stage.STAGE2:
            stages = [Stage.STAGE2]
    else:
        stages = [Stage(args.stage)]
    for stage in stages:
        try:
            path = trainer.train(stage, steps=args.steps)
        except NumericAbort as e:
            e.out_dir = trainer.out_dir
            raise
        logging.info(f"Finished {stage.value}, checkpoint at {path}")
    logging.info("Finished.")
    return EXIT_OK


def run_sample(args):
    from .exemplar2image import ExbI2I
    from .utils.bkt import load_tensor, save_tensor

    control, exemplar = load_tensor(args.control), load_tensor(args.exemplar)
    logging.info(f"Sampling job args: {args}")
    logging.info("Creating ExbI2I pipeline.")
    pipeline = ExbI2I(args.checkpoint, device=args.device, use_ema=not args.no_ema)
    logging.info("Generating grid ...")
    out = pipeline.generate(
        control,
        exemplar,
        sampling_steps=args.steps,
        seed=args.seed,
        dump_every=args.dump_every,
        trajectory_dir=args.trajectory_dir,
        progress=not args.quiet)
    save_tensor(out.float().cpu(), args.out)
    logging.info(f"Saved generated grid to {args.out}")
    return EXIT_OK


def run_verify(args):
    from .utils.verify_suites import run_suites

    report = run_suites(args.suite, args.seed)
    _emit_json(report, args.out)
    if report['failures'] > 0:
        logging.error(f"Verification failed: {report['failures']} failed checks")
        return EXIT_VERIFY
    logging.info("All verification checks passed.")
    return EXIT_OK


def run_evaluate(args):
    from .exemplar2image import ExbI2I
    from .utils.synthdata import DiskPairDataset

    pipeline = ExbI2I(args.checkpoint, device=args.device, use_ema=not args.no_ema)
    dataset = DiskPairDataset(args.data_dir, 'val', pipeline.dtype)
    report = pipeline.evaluate(dataset, n=args.n, sampling_steps=args.steps, seed=args.seed)
    _emit_json(report, args.out)
    return EXIT_OK


COMMANDS = {
    'schedule': run_schedule,
    'gen-data': run_gen_data,
    'train': run_train,
    'sample': run_sample,
    'verify': run_verify,
    'evaluate': run_evaluate,
}


def main(argv=None):
    args = _parse_args(argv)
    _init_logging(args.quiet, sys.stderr if _writes_stdout(args) else sys.stdout)
    from .trainer import NumericAbort, StageError

    try:
        _validate_args(args)
        return COMMANDS[args.command](args)
    except (ConfigError, StageError) as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NumericAbort as e:
        logging.error(f"Numeric abort: {e}")
        out_dir = getattr(e, "out_dir", None) or '.'
        path = cache_json(e.dump(), os.path.join(out_dir, 'numeric_abort.json'))
        logging.error(f"Wrote failing batch seeds and timesteps to {path}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
