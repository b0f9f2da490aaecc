import pytest


@pytest.mark.parametrize("T,S,steps", [
    (10, 10, [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]),
    (10, 2, [10, 5]),
    (10, 3, [10, 7, 3]),
    (10, 4, [10, 8, 5, 3]),
    (4, 1, [4]),
    (4, 2, [4, 2]),
    (7, 2, [7, 4]),
    (200, 4, [200, 150, 100, 50]),
])
def test_make_plan_table(T, S, steps):
    from exbridge.utils.bridge_solver import make_plan

    plan = make_plan(T, S)
    assert list(plan.steps) == steps
    assert plan.S == S and plan.T == T and not plan.clamped
    assert plan.pairs()[-1] == (steps[-1], 0)


def test_make_plan_properties():
    from exbridge.utils.bridge_solver import make_plan

    for T in (2, 10, 100, 1000):
        for S in range(1, min(T, 60) + 1):
            plan = make_plan(T, S)
            assert plan.steps[0] == T
            assert all(a > b for a, b in zip(plan.steps, plan.steps[1:]))
            assert plan.steps[-1] >= 1
            assert len(plan.steps) == S


def test_make_plan_clamps_and_rejects():
    from exbridge.utils.bridge_solver import make_plan

    plan = make_plan(10, 25)
    assert plan.clamped and list(plan.steps) == list(range(10, 0, -1))
    for S in (0, -3, 2.5):
        with pytest.raises(ValueError):
            make_plan(10, S)


def test_reverse_step_fixed_point():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import reverse_step

    sched = build_schedule(10, 1.0)
    y = torch.randn(2, 3, dtype=torch.float64)
    zero = torch.zeros_like(y)
    for t in range(2, 11):
        out = reverse_step(sched, y, y, zero, t, t - 1, zero)
        assert torch.allclose(out, y, atol=1e-10, rtol=0)


def test_reverse_step_final_step_is_noiseless():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.modules.tensor import ShapeError
    from exbridge.utils.bridge_solver import reverse_step

    sched = build_schedule(4, 1.0)
    x = torch.ones(3)
    with pytest.raises(ValueError):
        reverse_step(sched, x, x, x, 1, 0, torch.ones(3))
    reverse_step(sched, x, x, x, 1, 0, torch.zeros(3))
    with pytest.raises(ShapeError):
        reverse_step(sched, x, torch.ones(4), x, 2, 1)


def test_single_step_recovers_prediction():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan

    sched = build_schedule(4, 1.0)
    y = torch.randn(5, 3, dtype=torch.float64)
    x_hat = torch.randn(5, 3, dtype=torch.float64)

    def denoiser(x, t, token, feats):
        assert t == 4
        return y - x_hat

    out = generate(sched, make_plan(4, 1), denoiser, y)
    assert torch.allclose(out, x_hat, atol=1e-12, rtol=0)


def test_perfect_denoiser_inverts_forward_process():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan

    generator = torch.Generator().manual_seed(5)
    for T in (2, 4, 8):
        sched = build_schedule(T, 1.0)
        x0 = torch.randn(4, 3, generator=generator, dtype=torch.float64)
        y = torch.randn(4, 3, generator=generator, dtype=torch.float64)
        noises = [torch.randn(4, 3, generator=generator, dtype=torch.float64)
                  for _ in range(T - 1)]
        out = generate(sched, make_plan(T, T), lambda x, t, token, feats: x - x0, y,
                       noises=noises)
        assert float((out - x0).abs().max()) < 1e-6


def test_constant_denoiser_matches_replayed_recurrence():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan

    sched = build_schedule(6, 1.0)
    y = torch.tensor([0.8, -0.4], dtype=torch.float64)
    eps = 0.1
    noises = [torch.zeros(2, dtype=torch.float64) for _ in range(5)]
    out = generate(sched, make_plan(6, 6), lambda x, t, token, feats: torch.full_like(x, eps),
                   y, noises=noises)

    x = y.tolist()
    c_x, c_y, c_eps = sched.c_x.tolist(), sched.c_y.tolist(), sched.c_eps.tolist()
    for t in range(6, 0, -1):
        x = [c_x[t] * u + c_y[t] * v - c_eps[t] * eps for u, v in zip(x, y.tolist())]
    assert torch.allclose(out, torch.tensor(x, dtype=torch.float64), atol=1e-12, rtol=0)


def test_generate_is_deterministic():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan
    from exbridge.utils.rng import RngStream

    sched = build_schedule(50, 1.0)
    plan = make_plan(50, 10)
    y = torch.randn(3, 4)

    def denoiser(x, t, token, feats):
        return 0.1 * x - 0.05 * y

    stream = RngStream(9).split('sample')
    first = generate(sched, plan, denoiser, y, generator=stream.split(0).generator())
    second = generate(sched, plan, denoiser, y, generator=RngStream(9).split('sample').split(0).generator())
    assert torch.equal(first, second)


def test_per_element_streams_are_batch_independent():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan
    from exbridge.utils.rng import RngStream

    sched = build_schedule(20, 1.0)
    plan = make_plan(20, 20)
    y = torch.randn(3, 2, 2, dtype=torch.float64)

    def denoiser(x, t, token, feats):
        return 0.2 * x

    def streams(n):
        return [RngStream(4).split('sample').split(i).generator() for i in range(n)]

    batch = generate(sched, plan, denoiser, y, generator=streams(3))
    alone = generate(sched, plan, denoiser, y[:1], generator=streams(1))
    assert torch.equal(batch[:1], alone)


def test_callback_sees_decreasing_timesteps():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan

    sched = build_schedule(30, 1.0)
    plan = make_plan(30, 7)
    seen = []
    generate(sched, plan, lambda x, t, token, feats: torch.zeros_like(x), torch.zeros(2),
             generator=torch.Generator().manual_seed(0),
             callback=lambda i, t_next, x: seen.append((i, t_next, bool(torch.isfinite(x).all()))))
    assert [i for i, _, _ in seen] == list(range(7))
    assert [t for _, t, _ in seen] == list(plan.steps[1:]) + [0]
    assert all(finite for _, _, finite in seen)


def test_generate_checks_plan_and_noises():
    import torch

    from exbridge.modules.schedule import build_schedule
    from exbridge.utils.bridge_solver import generate, make_plan

    sched = build_schedule(10, 1.0)
    y = torch.zeros(2)
    with pytest.raises(ValueError):
        generate(sched, make_plan(20, 5), lambda *a: torch.zeros(2), y)
    with pytest.raises(ValueError):
        generate(sched, make_plan(10, 5), lambda *a: torch.zeros(2), y, noises=[torch.zeros(2)])
