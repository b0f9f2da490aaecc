import json
import math
import os

import pytest
import torch


def _config(tmp_path, **overrides):
    from exbridge.configs import make_run_config

    base = dict(
        lr=1e-3,
        batch_size=2,
        grad_accum=1,
        dataset_size=16,
        val_fraction=0.25,
        val_size=4,
        val_every=1000,
        log_every=1000,
        save_every=1000,
        stage1_steps=3,
        stage2_steps=3,
        num_train_timesteps=20,
        sample_steps=5,
        out_dir=str(tmp_path / "run"))
    base.update(overrides)
    return make_run_config('toy-4x4', **base)


def _trainer(tmp_path, **overrides):
    from exbridge.trainer import ExbTrainer

    return ExbTrainer(_config(tmp_path, **overrides))


def _first_batch(trainer):
    return next(iter(trainer.loader()))


def test_stage1_freezes_exemplar_branch(tmp_path):
    trainer = _trainer(tmp_path, grad_accum=2)
    trainer.train_step(_first_batch(trainer))
    assert trainer.state.step == 0 and trainer.state.micro_step == 1

    norms = trainer.grad_norms()
    assert norms['exemplar_net'] == 0.0
    assert norms['exemplar_attention'] == 0.0
    assert norms['backbone'] > 0.0
    groups = trainer.model.parameter_groups()
    assert all(p.requires_grad for _, p in groups['global_encoder'])
    assert not any(p.requires_grad for _, p in groups['exemplar_net'])


def test_stage2_freezes_backbone(tmp_path):
    from exbridge.trainer import Stage

    trainer = _trainer(tmp_path)
    trainer.train(steps=2)
    trainer.set_stage(Stage.STAGE2)
    assert trainer.state.stage_step == 0 and trainer.state.micro_step == 0

    backbone = {n: p.detach().clone() for n, p in trainer.model.parameter_groups()['backbone']}
    trainer.config.grad_accum = 2
    trainer.train_step(_first_batch(trainer))
    groups = trainer.model.parameter_groups()
    assert not any(p.requires_grad for _, p in groups['backbone'])
    assert not any(p.requires_grad for _, p in groups['global_encoder'])
    norms = trainer.grad_norms()
    assert norms['backbone'] == 0.0 and norms['global_encoder'] == 0.0
    assert norms['exemplar_attention'] > 0.0

    trainer.optimizer_step()
    for name, p in trainer.model.parameter_groups()['backbone']:
        assert torch.equal(p, backbone[name]), name


def test_stage_transitions(tmp_path):
    from exbridge.trainer import Stage, StageError

    trainer = _trainer(tmp_path)
    with pytest.raises(StageError):
        trainer.set_stage(Stage.STAGE2)

    trainer.save_checkpoint('stage1')
    trainer.set_stage('stage2')
    assert trainer.use_exemplar
    with pytest.raises(StageError):
        trainer.set_stage(Stage.STAGE1)
    with pytest.raises(ValueError):
        trainer.set_stage('stage3')


def test_stage2_starts_from_backbone_copy(tmp_path):
    trainer = _trainer(tmp_path, stage2_lr=2e-3)
    trainer.train(steps=1)
    shadow = {n: v.clone() for n, v in trainer.ema.shadow.items()}
    trainer.set_stage('stage2')
    assert trainer.lr == trainer.config.stage2_lr != trainer.config.lr

    # the frozen modules carry the stage 1 EMA weights sampling uses
    for name, p in trainer.model.named_parameters():
        if not name.startswith('exemplar_net.'):
            assert torch.equal(p, shadow[name]), name

    full = trainer.model.state_dict()
    mirrored = trainer.model.exemplar_net.state_dict()
    assert len(mirrored) > 0
    for name, value in mirrored.items():
        assert torch.equal(value, full[name]), name
        assert torch.equal(trainer.ema.shadow[f"exemplar_net.{name}"], value), name


def test_loss_is_zero_for_the_true_target(tmp_path):
    from exbridge.modules.bridge import forward_sample, loss_target

    trainer = _trainer(tmp_path, dtype='float64')
    sched = trainer.sched
    batch = trainer._batch(_first_batch(trainer))
    t, eps = trainer.draw_items(0, batch['target'])

    def exact(x_t, t, batch):
        draw = forward_sample(sched, batch['target'], batch['control'], t, eps=eps)
        return loss_target(sched, batch['target'], batch['control'], draw)

    loss, per_item = trainer.compute_loss(batch, t, eps, predictor=exact)
    assert float(loss) == 0.0 and per_item.shape == (2,)

    loss, _ = trainer.compute_loss(
        batch, t, eps, predictor=lambda x_t, t, batch: x_t - batch['target'])
    assert float(loss) < 1e-28


def test_loss_weights_per_item(tmp_path):
    from exbridge.modules.bridge import forward_sample, loss_target

    trainer = _trainer(tmp_path, dtype='float64')
    sched = trainer.sched
    batch = trainer._batch(_first_batch(trainer))
    t, eps = trainer.draw_items(0, batch['target'])

    loss, per_item = trainer.compute_loss(
        batch, t, eps, predictor=lambda x_t, t, batch: torch.zeros_like(x_t))
    draw = forward_sample(sched, batch['target'], batch['control'], t, eps=eps)
    target = loss_target(sched, batch['target'], batch['control'], draw)
    for i, t_i in enumerate(t.tolist()):
        expected = float(sched.c_eps[t_i]) * float(target[i].pow(2).mean())
        assert math.isclose(float(per_item[i]), expected, rel_tol=1e-12)
    assert math.isclose(float(loss), float(per_item.mean()), rel_tol=1e-12)


def test_item_draws_are_keyed_by_position(tmp_path):
    trainer = _trainer(tmp_path)
    like = torch.zeros(4, 3, 4, 4)
    t_all, eps_all = trainer.draw_items(10, like)
    t_tail, eps_tail = trainer.draw_items(12, like[:2])
    assert torch.equal(t_all[2:], t_tail)
    assert torch.equal(eps_all[2:], eps_tail)
    assert int(t_all.min()) >= 1 and int(t_all.max()) <= trainer.sched.T


def test_gradient_accumulation_matches_large_batch(tmp_path):
    big = _trainer(tmp_path / "big", dtype='float64', batch_size=4, grad_accum=1)
    small = _trainer(tmp_path / "small", dtype='float64', batch_size=2, grad_accum=2)
    big.train(steps=1)
    small.train(steps=1)

    assert big.state.item_counter == small.state.item_counter == 4
    assert math.isclose(big.state.history[0], small.state.history[0], rel_tol=1e-12)
    small_params = dict(small.model.named_parameters())
    for name, p in big.model.named_parameters():
        assert torch.allclose(p, small_params[name], rtol=0, atol=1e-9), name


def test_ema_is_a_convex_update(tmp_path):
    trainer = _trainer(tmp_path, dtype='float64')
    before = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}
    shadow = {n: v.clone() for n, v in trainer.ema.shadow.items()}
    trainer.train_step(_first_batch(trainer))

    d = trainer.ema.decay_at(0)
    assert d == 0.1 and trainer.ema.decay_at(10**6) == trainer.config.ema_decay
    for name, p in trainer.model.named_parameters():
        if p.requires_grad:
            expected = d * shadow[name] + (1 - d) * p.detach()
            assert torch.allclose(trainer.ema.shadow[name], expected, atol=1e-15), name
        else:
            assert torch.equal(trainer.ema.shadow[name], before[name]), name


def test_ema_shadow_swaps_in_and_out(tmp_path):
    trainer = _trainer(tmp_path)
    trainer.train(steps=2)
    raw = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}
    trainer.ema.apply_shadow()
    for name, p in trainer.model.named_parameters():
        assert torch.equal(p, trainer.ema.shadow[name])
    trainer.ema.restore()
    for name, p in trainer.model.named_parameters():
        assert torch.equal(p, raw[name])


def test_non_finite_prediction_aborts(tmp_path):
    from exbridge.trainer import NumericAbort

    trainer = _trainer(tmp_path)
    trainer.predict = lambda x_t, t, batch: torch.full_like(x_t, float('nan'))
    with pytest.raises(NumericAbort) as info:
        trainer.train_step(_first_batch(trainer))
    abort = info.value
    assert abort.step == 0
    assert len(abort.item_seeds) == len(abort.timesteps) == 2
    assert abort.item_seeds == trainer.item_seeds(0, 2)
    assert json.loads(json.dumps(abort.dump()))['timesteps'] == abort.timesteps
    assert trainer.state.item_counter == 0


def test_non_finite_lr_aborts(tmp_path):
    from exbridge.trainer import NumericAbort

    trainer = _trainer(tmp_path)
    trainer.optimizer.param_groups[0]['lr'] = float('nan')
    batches = iter(trainer.loader())
    trainer.train_step(next(batches))
    with pytest.raises(NumericAbort) as info:
        trainer.train_step(next(batches))
    assert info.value.step == 1


def test_metrics_and_checkpoint_layout(tmp_path):
    trainer = _trainer(tmp_path)
    path = trainer.train()
    assert trainer.state.step == 3 and trainer.state.stage_step == 3
    assert os.path.basename(path) == 'stage1'
    assert trainer.state.stage1_checkpoint == path
    for name in ('config.txt', 'model_config.json', 'weights.json', 'weights.bkt',
                 'ema.json', 'ema.bkt', 'train_state.pt', 'rng_state.json'):
        assert os.path.isfile(os.path.join(path, name)), name

    with open(os.path.join(trainer.out_dir, 'metrics.jsonl'), encoding='utf-8') as f:
        records = [json.loads(line) for line in f]
    assert [r['step'] for r in records] == [1, 2, 3]
    for record in records:
        assert set(record) == {'step', 'stage', 'loss', 'lr', 'grad_norm', 'ema_decay'}
        assert record['stage'] == 'stage1' and math.isfinite(record['loss'])

    # the stage budget is spent
    assert trainer.train() == path
    assert trainer.state.step == 3


def test_resume_continues_the_run(tmp_path):
    from exbridge.trainer import ExbTrainer

    straight = ExbTrainer(_config(tmp_path), out_dir=str(tmp_path / "straight"))
    straight.train(steps=4)

    first = ExbTrainer(_config(tmp_path), out_dir=str(tmp_path / "first"))
    first.train(steps=2)
    path = first.save_checkpoint()
    assert os.path.basename(path) == 'stage1-step000002'

    resumed = ExbTrainer.from_checkpoint(path, out_dir=str(tmp_path / "resumed"))
    assert resumed.state.step == 2 and resumed.state.item_counter == 4
    resumed.train(steps=2)

    assert resumed.state.step == straight.state.step == 4
    assert resumed.state.item_counter == straight.state.item_counter
    assert resumed.state.history == pytest.approx(straight.state.history, rel=1e-6)
    params = dict(resumed.model.named_parameters())
    for name, p in straight.model.named_parameters():
        assert torch.allclose(p, params[name], rtol=0, atol=1e-6), name


def test_resume_into_stage2(tmp_path):
    from exbridge.trainer import ExbTrainer, Stage

    trainer = _trainer(tmp_path)
    trainer.train()
    path = trainer.train(Stage.STAGE2, steps=1)
    assert os.path.basename(path) == 'stage2'

    resumed = ExbTrainer.from_checkpoint(path, out_dir=str(tmp_path / "again"))
    assert resumed.state.stage == Stage.STAGE2 and resumed.use_exemplar
    assert resumed.state.stage_step == 1
    groups = resumed.model.parameter_groups()
    assert not any(p.requires_grad for _, p in groups['backbone'])
    resumed.train()
    assert resumed.state.stage_step == 3


def test_validation_is_fixed(tmp_path):
    first = _trainer(tmp_path)
    second = _trainer(tmp_path)
    loss = first.validate()
    assert math.isfinite(loss)
    assert first.validate() == loss
    assert second.validate() == loss
    assert first.model.training


def test_plateau_decays_lr(tmp_path):
    trainer = _trainer(tmp_path, plateau_patience=0)
    lr = trainer.lr
    trainer._plateau(1.0)
    assert trainer.lr == lr
    trainer._plateau(2.0)
    assert math.isclose(trainer.lr, lr * trainer.config.plateau_factor)



def test_same_seed_histories_are_identical(tmp_path):
    first = _trainer(tmp_path / "a", dtype='float64')
    second = _trainer(tmp_path / "b", dtype='float64')
    first.train(steps=4)
    second.train(steps=4)
    assert len(first.state.history) == 4
    assert first.state.history == second.state.history


def test_resume_rejects_mismatched_rng_state(tmp_path):
    from exbridge.configs import ConfigError
    from exbridge.trainer import ExbTrainer

    trainer = _trainer(tmp_path)
    path = trainer.train(steps=1)
    rng_path = os.path.join(path, 'rng_state.json')
    with open(rng_path, encoding='utf-8') as f:
        saved = json.load(f)
    assert saved['item_counter'] == trainer.state.item_counter
    assert ExbTrainer.from_checkpoint(path).state.step == 1

    saved['item_counter'] += 1
    with open(rng_path, 'w', encoding='utf-8') as f:
        json.dump(saved, f)
    with pytest.raises(ConfigError):
        ExbTrainer.from_checkpoint(path)


def test_train_step_returns_a_plain_float(tmp_path):
    import warnings

    trainer = _trainer(tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        loss = trainer.train_step(_first_batch(trainer))
    assert type(loss) is float
    assert trainer.state.history == [loss]


def _moving_average(history, end, window=50):
    return sum(history[end - window:end]) / window


@pytest.mark.slow
def test_stage1_loss_decreases(tmp_path):
    from exbridge.configs import make_run_config
    from exbridge.trainer import ExbTrainer

    cfg = make_run_config('toy-8x8', lr=1e-3, seed=3, val_every=1000, save_every=1000,
                          out_dir=str(tmp_path / "run"))
    trainer = ExbTrainer(cfg)
    trainer.train(steps=200)
    history = trainer.state.history
    assert len(history) == 200
    assert _moving_average(history, 200) < _moving_average(history, 50)


@pytest.mark.slow
def test_two_stage_acceptance(tmp_path):
    from exbridge.configs import make_run_config
    from exbridge.exemplar2image import ExbI2I
    from exbridge.trainer import ExbTrainer, Stage

    # shipped toy-8x8 schedule: T = 200, 2000 + 2000 steps
    cfg = make_run_config('toy-8x8', out_dir=str(tmp_path / "run"))
    trainer = ExbTrainer(cfg)
    stage1 = trainer.train()
    history = list(trainer.state.history)
    assert len(history) == cfg.stage1_steps
    assert _moving_average(history, len(history)) < 0.5 * _moving_average(history, 50)

    # zero-initialised exemplar attention keeps the loss continuous at the switch
    before = trainer.validate()
    trainer.set_stage(Stage.STAGE2)
    after = trainer.validate()
    assert abs(after - before) < 0.1 * before

    stage2 = trainer.train()
    assert trainer.state.stage_step == cfg.stage2_steps

    val = trainer.val_set
    assert len(val) >= 64
    baseline = ExbI2I(stage1).evaluate(val, n=64)
    report = ExbI2I(stage2).evaluate(val, n=64)
    assert report['n'] == baseline['n'] == 64
    assert report['median_amplitude_error'] < baseline['median_amplitude_error']
    assert report['median_amplitude_error'] < 0.25
