import csv
import io
import json
import os

import pytest
import torch


def _write_config(path, out_dir, **overrides):
    from exbridge.configs import dump_run_config, make_run_config

    base = dict(
        lr=1e-3,
        batch_size=2,
        grad_accum=1,
        dataset_size=16,
        val_size=4,
        val_fraction=0.25,
        stage1_steps=2,
        stage2_steps=2,
        num_train_timesteps=20,
        sample_steps=4,
        out_dir=str(out_dir))
    base.update(overrides)
    return dump_run_config(make_run_config('toy-4x4', **base), str(path))


def test_schedule_to_stdout(capsys):
    from exbridge.cli import main

    assert main(['--quiet', 'schedule', '--T', '4', '--s', '1']) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r['t']) for r in rows] == [0, 1, 2, 3, 4]
    assert [float(r['delta']) for r in rows] == [0.0, 0.375, 0.5, 0.375, 0.0]
    assert [float(r['m']) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_schedule_to_file(tmp_path):
    from exbridge.cli import main
    from exbridge.modules.schedule import build_schedule, to_csv

    out = tmp_path / "schedule.csv"
    assert main(['--quiet', 'schedule', '--T', '10', '--s', '0.5', '--out', str(out)]) == 0
    assert out.read_text(encoding='utf-8') == to_csv(build_schedule(10, 0.5))


@pytest.mark.parametrize("argv", [
    ['schedule', '--T', '1'],
    ['schedule', '--s', '0'],
    ['gen-data', '--n', '1', '--out_dir', 'unused'],
    ['train', '--config', 'missing.txt'],
    ['sample', '--checkpoint', 'missing', '--control', 'a', '--exemplar', 'b', '--out', 'c'],
])
def test_bad_arguments_exit_with_config_error(argv):
    from exbridge.cli import EXIT_CONFIG, main

    assert main(['--quiet'] + argv) == EXIT_CONFIG


def test_bad_config_file(tmp_path):
    from exbridge.cli import EXIT_CONFIG, main

    path = tmp_path / "config.txt"
    path.write_text("preset = toy-4x4\nheads = 3\n", encoding='utf-8')
    assert main(['--quiet', 'train', '--config', str(path)]) == EXIT_CONFIG


def test_gen_data(tmp_path):
    from exbridge.cli import main
    from exbridge.utils.synthdata import DiskPairDataset

    out = tmp_path / "data"
    argv = ['--quiet', 'gen-data', '--n', '8', '--grid', '4*4', '--seed', '3',
            '--val-fraction', '0.25', '--out-dir', str(out)]
    assert main(argv) == 0
    with open(out / "manifest.json", encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['grid'] == [4, 4] and len(manifest['samples']) == 8
    assert len(DiskPairDataset(str(out), 'val')) == 2
    assert DiskPairDataset(str(out), 'train')[0]['control'].shape == (3, 4, 4)


def test_verify_schedule_suite(tmp_path):
    from exbridge.cli import main

    out = tmp_path / "report.json"
    assert main(['--quiet', 'verify', '--suite', 'schedule', '--out', str(out)]) == 0
    with open(out, encoding='utf-8') as f:
        report = json.load(f)
    assert report['failures'] == 0
    assert [r['suite'] for r in report['reports']] == ['schedule']


def test_verify_failure_exit_code(monkeypatch):
    from exbridge import cli
    from exbridge.utils import verify_suites

    monkeypatch.setattr(
        verify_suites, 'run_suites',
        lambda suite, seed: {'suite': suite, 'seed': seed, 'reports': [], 'failures': 1})
    assert cli.main(['--quiet', 'verify', '--suite', 'schedule']) == cli.EXIT_VERIFY


def test_stage2_without_stage1(tmp_path):
    from exbridge.cli import EXIT_CONFIG, main

    config = _write_config(tmp_path / "config.txt", tmp_path / "run")
    assert main(['--quiet', 'train', '--config', config, '--stage', 'stage2']) == EXIT_CONFIG


def test_numeric_abort_writes_replay_info(tmp_path, monkeypatch):
    from exbridge.cli import EXIT_NUMERIC, main
    from exbridge.trainer import ExbTrainer

    monkeypatch.setattr(
        ExbTrainer, 'predict',
        lambda self, x_t, t, batch: torch.full_like(x_t, float('nan')))
    config = _write_config(tmp_path / "config.txt", tmp_path / "run")
    assert main(['--quiet', 'train', '--config', config]) == EXIT_NUMERIC
    with open(tmp_path / "run" / "numeric_abort.json", encoding='utf-8') as f:
        dump = json.load(f)
    assert dump['step'] == 0
    assert len(dump['item_seeds']) == len(dump['timesteps']) == 2


def test_train_sample_evaluate(tmp_path):
    from exbridge.cli import main
    from exbridge.utils.bkt import load_tensor

    data = tmp_path / "data"
    assert main(['--quiet', 'gen-data', '--n', '8', '--grid', '4*4', '--val_fraction', '0.25',
                 '--out_dir', str(data)]) == 0
    run = tmp_path / "run"
    config = _write_config(tmp_path / "config.txt", run, data_dir=str(data))
    assert main(['--quiet', 'train', '--config', config]) == 0
    checkpoint = run / "stage2"
    assert (run / "stage1" / "weights.bkt").is_file()
    assert (checkpoint / "ema.bkt").is_file()

    control = str(data / "sample_00000_control.bkt")
    exemplar = str(data / "sample_00001_exemplar.bkt")

    def sample(out, seed, *extra):
        argv = ['--quiet', 'sample', '--checkpoint', str(checkpoint), '--control', control,
                '--exemplar', exemplar, '--seed', str(seed), '--out', str(out)]
        assert main(argv + list(extra)) == 0
        with open(out, 'rb') as f:
            return f.read()

    first = sample(tmp_path / "a.bkt", 5)
    assert sample(tmp_path / "b.bkt", 5) == first
    assert sample(tmp_path / "c.bkt", 6) != first
    assert load_tensor(str(tmp_path / "a.bkt")).shape == (3, 4, 4)

    trajectory = tmp_path / "trajectory"
    sample(tmp_path / "d.bkt", 5, '--dump-every', '2', '--trajectory-dir', str(trajectory))
    dumps = sorted(os.listdir(trajectory))
    assert dumps == ['step_0002_t0010.bkt', 'step_0004_t0000.bkt']
    assert (tmp_path / "d.bkt").read_bytes() == first
    assert (trajectory / dumps[-1]).read_bytes() == first

    out = tmp_path / "eval.json"
    argv = ['--quiet', 'evaluate', '--checkpoint', str(checkpoint), '--data_dir', str(data),
            '--n', '2', '--steps', '2', '--out', str(out)]
    assert main(argv) == 0
    with open(out, encoding='utf-8') as f:
        report = json.load(f)
    assert report['n'] == 2 and report['stage'] == 'stage2'
    assert 0.0 <= report['texture_accuracy'] <= 1.0


def test_resume_from_cli(tmp_path):
    from exbridge.cli import main
    from exbridge.trainer import ExbTrainer

    run = tmp_path / "run"
    config = _write_config(tmp_path / "config.txt", run)
    assert main(['--quiet', 'train', '--config', config, '--stage', 'stage1', '--steps', '1']) == 0
    assert main(['--quiet', 'train', '--resume', str(run / "stage1"), '--stage', 'all']) == 0

    trainer = ExbTrainer.from_checkpoint(str(run / "stage2"))
    assert trainer.state.stage.value == 'stage2'
    assert trainer.state.step == 1 + 1 + 2
