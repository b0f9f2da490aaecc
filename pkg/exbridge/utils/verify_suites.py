import logging
import math
import time
from fractions import Fraction

import torch

from ..configs import make_run_config
from ..modules.attention import attention
from ..modules.bridge import forward_sample
from ..modules.model import ExbModel
from ..modules.schedule import build_schedule, loss_weight
from ..modules.tensor import (
    backward,
    chunk,
    concat,
    directional_gradcheck,
    gradcheck,
    layernorm,
    matmul,
    mean,
    precision,
    silu,
    softmax,
)
from .bridge_solver import make_plan
from .gaussian_oracle import (
    GaussianWorld,
    Z_TOLERANCE,
    mc_posterior_check,
    mc_transition_check,
    optimality_gap,
    posterior_regression,
    verify_sampler,
)
from .rng import RngStream

__all__ = ['SUITES', 'run_suite', 'run_suites', 'rational_coefficients', 'randomize_']

SUITES = ('schedule', 'oracle', 'gradcheck')
SCHEDULE_GRID = [(T, s) for T in (2, 4, 10, 100, 1000) for s in (0.5, 1.0, 2.0)]


class CheckList:

    def __init__(self, suite, seed):
        self.suite = suite
        self.seed = seed
        self.checks = []
        self.start = time.perf_counter()

    def add(self, name, passed, **details):
        self.checks.append({'name': name, 'passed': bool(passed), **details})
        if not passed:
            logging.warning(f"[{self.suite}] check failed: {name} {details}")

    def report(self):
        failures = [c['name'] for c in self.checks if not c['passed']]
        return {
            'suite': self.suite,
            'seed': self.seed,
            'checks': self.checks,
            'failures': len(failures),
            'failed': failures,
            'seconds': time.perf_counter() - self.start,
        }


def rational_coefficients(T, s, t, t_next=None):
    r"""
    Exact rational delta_hat, delta_tilde, c_x, c_y and c_eps for the pair
    (t, t_next) with 1 <= t < T, evaluated from the closed forms.
    """
    t_next = t - 1 if t_next is None else t_next
    s = Fraction(s)
    m_t, m_n = Fraction(t, T), Fraction(t_next, T)
    d_t, d_n = 2 * s * (m_t - m_t**2), 2 * s * (m_n - m_n**2)
    delta_hat = d_t - d_n * ((1 - m_t) / (1 - m_n))**2
    return {
        'delta_hat': delta_hat,
        'delta_tilde': delta_hat * d_n / d_t,
        'c_x': (d_n / d_t) * (1 - m_t) / (1 - m_n) + (delta_hat / d_t) * (1 - m_n),
        'c_y': m_n - m_t * (1 - m_t) / (1 - m_n) * (d_n / d_t),
        'c_eps': (1 - m_n) * delta_hat / d_t,
    }


def _schedule_suite(checks, seed):
    for T, s in SCHEDULE_GRID:
        sched = build_schedule(T, s)
        tag = f"T={T},s={s}"
        checks.add(f"endpoints[{tag}]",
                   sched.m[0] == 0 and sched.m[T] == 1 and sched.delta[0] == 0 and
                   sched.delta[T] == 0)
        checks.add(f"m_increasing[{tag}]", bool((sched.m[1:] > sched.m[:-1]).all()))
        max_err = abs(float(sched.delta.max()) - s / 2)
        checks.add(f"max_delta[{tag}]", max_err <= 1e-12, error=max_err)
        sum_err = float(abs(sched.c_x[2:] + sched.c_y[2:] - 1).max())
        checks.add(f"c_x_plus_c_y[{tag}]", sum_err <= 1e-10, error=sum_err)
        checks.add(f"delta_tilde_nonneg[{tag}]",
                   bool((sched.delta_tilde[1:] >= 0).all()) and sched.delta_tilde[1] == 0)
        checks.add(f"delta_hat_positive[{tag}]", bool((sched.delta_hat[1:T] > 0).all()))
        again = build_schedule(T, s)
        checks.add(f"deterministic[{tag}]", all(
            getattr(sched, k).tobytes() == getattr(again, k).tobytes()
            for k in ('m', 'delta', 'delta_hat', 'delta_tilde', 'c_x', 'c_y', 'c_eps')))

    sched = build_schedule(4, 1.0)
    exact = rational_coefficients(4, 1, 2)
    for key, value in exact.items():
        got = float(getattr(sched, key)[2])
        checks.add(f"rational[T=4,t=2,{key}]", abs(got - float(value)) <= 1e-15, value=got,
                   expected=str(value))
    checks.add("delta_values[T=4]", sched.delta.tolist() == [0.0, 0.375, 0.5, 0.375, 0.0])
    checks.add("loss_weight[T=4,t=2]", abs(loss_weight(sched, 2).value - 0.5) <= 1e-15)
    checks.add("loss_weight[T=4,t=1]", loss_weight(sched, 1).value == 1.0)

    stream = RngStream(seed).split('verify').split('schedule')
    sched = build_schedule(10, 1.0)
    for t in (1, 3, 5, 10):
        report = mc_transition_check(sched, 2.0, -1.0, t, 10**5, stream.split(('tr', t)).generator())
        checks.add(f"mc_transition[t={t}]", report['passed'],
                   mean_z=report['mean_z'], var_z=report['var_z'])
        report = mc_posterior_check(sched, 2.0, -1.0, t, 10**5, stream.split(('po', t)).generator())
        checks.add(f"mc_posterior[t={t}]", report['passed'],
                   mean_z=report['mean_z'], var_z=report['var_z'])

    # forward variance law, per coordinate
    generator = stream.split('forward').generator()
    for k in range(10):
        T = 10 * (k + 1)
        t = int(torch.randint(1, T, (), generator=generator))
        sched = build_schedule(T, 1.0)
        x0 = torch.randn(3, generator=generator, dtype=torch.float64)
        y = torch.randn(3, generator=generator, dtype=torch.float64)
        n = 10**5
        draws = forward_sample(sched, x0.expand(n, 3), y.expand(n, 3), t, generator).x_t
        var = draws.var(dim=0)
        delta = float(sched.delta[t])
        z = (var - delta) / (delta * math.sqrt(2.0 / (n - 1)))
        checks.add(f"forward_variance[T={T},t={t}]", bool(z.abs().max() < Z_TOLERANCE),
                   z=z.tolist())


def _oracle_suite(checks, seed):
    stream = RngStream(seed).split('verify').split('oracle')
    world = GaussianWorld.bivariate(rho=0.8)
    sched = build_schedule(100, 1.0)
    full = make_plan(100, 100)
    for k in range(5):
        report = verify_sampler(world, sched, full, 10**4, stream.split(('full', k)).generator())
        checks.add(f"sampler_full_plan[seed={k}]", report['passed'],
                   max_abs_mean_z=report['max_abs_mean_z'],
                   covariance_deficit=report['covariance_deficit'])

    report = verify_sampler(world, sched, make_plan(100, 1), 16, stream.split('single').generator())
    err = abs(report['empirical_mean'][0] - report['analytic_mean'][0])
    checks.add("sampler_single_step_exact", err < 1e-6, error=err)

    report = verify_sampler(world, sched, make_plan(100, 50), 10**4, stream.split('half').generator())
    checks.add("sampler_half_plan_mean", report['passed'],
               max_abs_mean_z=report['max_abs_mean_z'],
               covariance_deficit=report['covariance_deficit'])

    world3 = GaussianWorld.random(3, stream.split('world').generator())
    for t in (1, 25, 50, 99):
        report = optimality_gap(world3, sched, t, 16384, stream.split(('gap', t)).generator())
        checks.add(f"optimality[t={t}]", report['passed'],
                   optimal=report['optimal_loss'], perturbed=report['perturbed_loss'])

    report = posterior_regression(sched, 50, 10**5, stream.split('regression').generator())
    checks.add("posterior_regression[T=100,t=50]", report['passed'],
               fitted=report['fitted'], expected=report['expected'])


def randomize_(model, generator, std=0.2):
    r"""
    Overwrite every parameter with N(0, std^2) draws, zero-initialised layers
    included, so every path of the network carries gradient.
    """
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(std * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return model


def _gradcheck_suite(checks, seed):
    stream = RngStream(seed).split('verify').split('gradcheck')
    generator = stream.generator()

    def rand(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    with precision(torch.float64):
        primitives = {
            'matmul': (lambda a, b: matmul(a, b).sum(), (rand(5, 4), rand(4, 3))),
            'softmax': (lambda x: softmax(x, axis=-1) * torch.arange(4.0), (rand(3, 4),)),
            'silu': (silu, (rand(3, 4),)),
            'layernorm': (lambda x, g, b: layernorm(x, g, b), (rand(3, 4), rand(4), rand(4))),
            'mean': (lambda x: mean(x, axis=1), (rand(3, 4),)),
            'concat_chunk': (lambda a, b: chunk(concat([a, b], -1) * 2, 2, -1)[1],
                             (rand(2, 3), rand(2, 3))),
            'attention': (lambda q, k, v: attention(q, k, v),
                          (rand(1, 3, 2, 2), rand(1, 4, 2, 2), rand(1, 4, 2, 2))),
        }
        for name, (fn, inputs) in primitives.items():
            checks.add(f"primitive[{name}]", gradcheck(fn, inputs))

        a, b = 0.7, -1.3
        x = rand(3, 4).requires_grad_(True)
        backward((a * silu(x).sum() + b * softmax(x).pow(2).sum()))
        combined = x.grad.clone()
        x.grad = None
        backward(silu(x).sum())
        gf = x.grad.clone()
        x.grad = None
        backward(softmax(x).pow(2).sum())
        gg = x.grad.clone()
        err = float((combined - (a * gf + b * gg)).abs().max())
        checks.add("linearity", err <= 1e-10, error=err)

        cfg = make_run_config('toy-4x4', dtype='float64')
        model = randomize_(ExbModel.from_run_config(cfg).double(), generator)
        x_t, exemplar = rand(2, cfg.channels, cfg.grid_h, cfg.grid_w), rand(
            2, cfg.channels, cfg.grid_h, cfg.grid_w)
        t = torch.tensor([3, 150])

        def loss_fn():
            return model(x_t, t, exemplar, use_exemplar=True).pow(2).mean()

        errors = directional_gradcheck(
            loss_fn, model.named_parameters(), stream.split('directions').generator())
        worst = max(errors, key=errors.get)
        checks.add("denoiser_directional", errors[worst] < 1e-4,
                   worst=worst, error=errors[worst], parameters=len(errors))


def run_suite(suite, seed=0):
    r"""
    Run one verification suite.

    Returns:
        dict report with every check and the number of failures
    """
    runners = {
        'schedule': _schedule_suite,
        'oracle': _oracle_suite,
        'gradcheck': _gradcheck_suite,
    }
    if suite not in runners:
        raise ValueError(f"unknown suite {suite}, choose from {', '.join(SUITES)}")
    checks = CheckList(suite, seed)
    logging.info(f"Running verification suite {suite} with seed {seed}")
    runners[suite](checks, seed)
    report = checks.report()
    logging.info(f"Suite {suite}: {len(report['checks'])} checks, "
                 f"{report['failures']} failures, {report['seconds']:.1f}s")
    return report


def run_suites(suite='all', seed=0):
    names = SUITES if suite == 'all' else (suite,)
    reports = [run_suite(name, seed) for name in names]
    return {
        'suite': suite,
        'seed': seed,
        'reports': reports,
        'failures': sum(r['failures'] for r in reports),
    }
