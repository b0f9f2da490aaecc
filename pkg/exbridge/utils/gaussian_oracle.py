import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from ..modules.bridge import forward_sample
from ..modules.schedule import pair_coefficients
from .bridge_solver import generate

__all__ = [
    'GaussianWorld',
    'TransitionKernel',
    'OracleDenoiser',
    'RIDGE',
    'Z_TOLERANCE',
    'transition_kernel',
    'optimal_eps',
    'verify_sampler',
    'optimality_gap',
    'mc_transition_check',
    'mc_posterior_check',
    'posterior_regression',
]

RIDGE = 1e-9
Z_TOLERANCE = 4.0


@dataclass
class GaussianWorld:
    r"""
    Jointly Gaussian (x0, y) over R^d x R^d, float64. `mean` has 2d entries
    ordered (x0, y) and `cov` is the 2d x 2d joint covariance.
    """
    dim: int
    mean: torch.Tensor
    cov: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64).reshape(-1)
        self.cov = torch.as_tensor(self.cov, dtype=torch.float64)
        n = 2 * self.dim
        if self.mean.numel() != n or tuple(self.cov.shape) != (n, n):
            raise ValueError(
                f"world of dim {self.dim} needs mean [{n}] and cov [{n}, {n}], "
                f"got {tuple(self.mean.shape)} and {tuple(self.cov.shape)}")
        if float((self.cov - self.cov.T).abs().max()) > 1e-12:
            raise ValueError("covariance is not symmetric")
        if float(torch.linalg.eigvalsh(self.cov).min()) < -1e-10:
            raise ValueError("covariance is not positive semidefinite")

    @classmethod
    def bivariate(cls, rho=0.8, mean=(0.0, 0.0), scale=(1.0, 1.0)):
        r"""
        d = 1 world with correlation `rho` between x0 and y.
        """
        sx, sy = scale
        cov = [[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]]
        return cls(1, torch.tensor(mean), torch.tensor(cov))

    @classmethod
    def random(cls, dim, generator=None, coupling=0.8):
        r"""
        Random well-conditioned world with x0 and y correlated through a
        shared factor.
        """
        a = torch.randn(dim, dim, generator=generator, dtype=torch.float64)
        b = torch.randn(dim, dim, generator=generator, dtype=torch.float64)
        factor = torch.cat([a, coupling * a + (1 - coupling**2)**0.5 * b])
        cov = factor @ factor.T / dim + 0.1 * torch.eye(2 * dim, dtype=torch.float64)
        cov = (cov + cov.T) / 2
        mean = torch.randn(2 * dim, generator=generator, dtype=torch.float64)
        return cls(dim, mean, cov)

    @property
    def blocks(self):
        d = self.dim
        return (self.mean[:d], self.mean[d:], self.cov[:d, :d], self.cov[:d, d:],
                self.cov[d:, d:])

    def sample(self, n, generator=None):
        r"""
        Returns:
            (x0, y), each [n, d]
        """
        evals, evecs = torch.linalg.eigh(self.cov)
        root = evecs * evals.clamp(min=0).sqrt()
        z = torch.randn(n, 2 * self.dim, generator=generator, dtype=torch.float64)
        joint = self.mean + z @ root.T
        return joint[:, :self.dim], joint[:, self.dim:]

    def conditional(self, y):
        r"""
        Analytic N(E[x0|y], Cov[x0|y]) for one control vector `y` of shape [d].
        """
        mx, my, sxx, sxy, syy = self.blocks
        syy_inv, _ = _regularized_inverse(syy)
        mean = mx + sxy @ syy_inv @ (torch.as_tensor(y, dtype=torch.float64) - my)
        cov = sxx - sxy @ syy_inv @ sxy.T
        return mean, (cov + cov.T) / 2


class TransitionKernel(NamedTuple):
    a: float
    b: float
    var: float


def transition_kernel(sched, t):
    r"""
    Forward one-step kernel q(x_t | x_{t-1}, y) = N(a x_{t-1} + b y, var) with
    a = (1 - m_t) / (1 - m_{t-1}), b = m_t - a m_{t-1} and var = delta_hat_t.
    """
    sched.check_timestep(t, lo=1)
    m_t, m_p = float(sched.m[t]), float(sched.m[t - 1])
    a = (1.0 - m_t) / (1.0 - m_p)
    return TransitionKernel(a, m_t - a * m_p, float(sched.delta_hat[t]))


def _regularized_inverse(matrix):
    _, info = torch.linalg.cholesky_ex(matrix)
    if int(info) == 0:
        return torch.linalg.inv(matrix), False
    eye = torch.eye(matrix.size(0), dtype=matrix.dtype)
    return torch.linalg.inv(matrix + RIDGE * eye), True


def _target_gain(world, sched, t):
    r"""
    Linear map (offset, gain) with E[x_t - x0 | x_t, y] = offset + gain @ [x_t; y].
    """
    d = world.dim
    eye = torch.eye(d, dtype=torch.float64)
    zero = torch.zeros(d, d, dtype=torch.float64)
    m, delta = float(sched.m[t]), float(sched.delta[t])

    # latent z = (x0, y, eps) with cov blockdiag(joint, I)
    cov_z = torch.block_diag(world.cov, eye)
    mean_z = torch.cat([world.mean, torch.zeros(d, dtype=torch.float64)])
    obs = torch.cat([
        torch.cat([(1 - m) * eye, m * eye, math.sqrt(delta) * eye], dim=1),
        torch.cat([zero, eye, zero], dim=1),
    ])
    tau = torch.cat([-m * eye, m * eye, math.sqrt(delta) * eye], dim=1)

    cov_oo = obs @ cov_z @ obs.T
    cov_to = tau @ cov_z @ obs.T
    inv, regularized = _regularized_inverse((cov_oo + cov_oo.T) / 2)
    gain = cov_to @ inv
    offset = tau @ mean_z - gain @ (obs @ mean_z)
    return offset, gain, regularized


class OracleDenoiser:
    r"""
    Closed-form optimal denoiser of a Gaussian world, usable wherever
    `generate` expects a network. Conditioning gains are cached per timestep.
    """

    def __init__(self, world, sched):
        self.world = world
        self.sched = sched
        self._cache = {}
        self.regularized_steps = set()

    def gain(self, t):
        t = int(t)
        if t not in self._cache:
            offset, gain, regularized = _target_gain(self.world, self.sched, t)
            if regularized:
                logging.warning(
                    f"Singular conditioning covariance at t = {t}, added ridge {RIDGE}")
                self.regularized_steps.add(t)
            self._cache[t] = (offset, gain)
        return self._cache[t]

    def __call__(self, x_t, t, token=None, feats=None):
        offset, gain = self.gain(t)
        obs = torch.cat([x_t.to(torch.float64), self._broadcast(x_t)], dim=-1)
        return (offset + obs @ gain.T).to(x_t.dtype)

    def bind(self, y):
        r"""
        Fix the control, so the denoiser sees y alongside x_t.
        """
        self._y = y.to(torch.float64)
        return self

    def _broadcast(self, x_t):
        y = getattr(self, '_y', None)
        assert y is not None, "bind(y) before calling the oracle denoiser"
        return y.expand_as(x_t)


def optimal_eps(world, sched, x_t, y, t):
    r"""
    E[m_t (y - x0) + sqrt(delta_t) eps | x_t, y] by Gaussian conditioning.

    Args:
        x_t (`torch.Tensor`): shape [d] or [n, d]
        y (`torch.Tensor`): same shape as `x_t`
    """
    sched.check_timestep(int(t), lo=1)
    return OracleDenoiser(world, sched).bind(torch.as_tensor(y))(
        torch.as_tensor(x_t, dtype=torch.float64), t)


def _moments(samples):
    n = samples.size(0)
    mean = samples.mean(dim=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    return mean, cov, centered


def verify_sampler(world, sched, plan, n_samples, generator=None, y=None):
    r"""
    Sample x0 for one fixed control with the oracle denoiser and compare the
    empirical moments with the analytic conditional N(E[x0|y], Cov[x0|y]).

    The report carries per-entry z-scores of the mean and covariance. Only the
    mean test decides `passed`; the covariance deficit of subsampled plans is
    reported.
    """
    d = world.dim
    if y is None:
        _, my, _, _, syy = world.blocks
        y = my + 0.5 * syy.diagonal().sqrt()
    y = torch.as_tensor(y, dtype=torch.float64).reshape(d)
    mu, sigma = world.conditional(y)

    y_batch = y.expand(n_samples, d).clone()
    denoiser = OracleDenoiser(world, sched).bind(y_batch)
    x0 = generate(sched, plan, denoiser, y_batch, generator=generator)
    mean, cov, centered = _moments(x0)

    var = centered.pow(2).mean(dim=0)
    if float(var.max()) <= 1e-24:
        mean_err = (mean - mu).abs()
        mean_z = torch.zeros(d, dtype=torch.float64)
        passed = bool(mean_err.max() < 1e-6)
    else:
        mean_z = (mean - mu) / (var.clamp(min=1e-300) / n_samples).sqrt()
        passed = bool(mean_z.abs().max() < Z_TOLERANCE)
    prod = centered.unsqueeze(2) * centered.unsqueeze(1)
    cov_se = (prod.var(dim=0) / n_samples).sqrt().clamp(min=1e-300)
    cov_z = (cov - sigma) / cov_se

    report = {
        'plan': list(plan.steps),
        'n_samples': n_samples,
        'y': y.tolist(),
        'analytic_mean': mu.tolist(),
        'empirical_mean': mean.tolist(),
        'mean_z': mean_z.tolist(),
        'max_abs_mean_z': float(mean_z.abs().max()),
        'analytic_cov': sigma.tolist(),
        'empirical_cov': cov.tolist(),
        'cov_z': cov_z.tolist(),
        'covariance_deficit': float(sigma.trace() - cov.trace()),
        'regularized_steps': sorted(denoiser.regularized_steps),
        'passed': passed,
    }
    return report


def optimality_gap(world, sched, t, n, generator=None, eta=0.1):
    r"""
    Weighted regression loss of the oracle denoiser against the same denoiser
    shifted by `eta` along a random unit direction.
    """
    x0, y = world.sample(n, generator)
    draw = forward_sample(sched, x0, y, t, generator)
    target = draw.x_t - x0
    pred = OracleDenoiser(world, sched).bind(y)(draw.x_t, t)
    u = torch.randn(world.dim, generator=generator, dtype=torch.float64)
    u = u / u.norm()
    weight = float(sched.c_eps[t])
    optimal = weight * float((target - pred).pow(2).sum(dim=1).mean())
    perturbed = weight * float((target - pred - eta * u).pow(2).sum(dim=1).mean())
    return {
        't': t,
        'optimal_loss': optimal,
        'perturbed_loss': perturbed,
        'passed': optimal < perturbed,
    }


def _law_check(samples, mean, var):
    n = samples.numel()
    emp_mean, emp_var = float(samples.mean()), float(samples.var())
    if var == 0.0:
        err = float((samples - mean).abs().max())
        return {
            'mean': emp_mean,
            'var': emp_var,
            'expected_mean': mean,
            'expected_var': var,
            'mean_z': 0.0,
            'var_z': 0.0,
            'max_abs_error': err,
            'passed': err < 1e-9,
        }
    mean_z = (emp_mean - mean) / math.sqrt(var / n)
    var_z = (emp_var - var) / (var * math.sqrt(2.0 / (n - 1)))
    return {
        'mean': emp_mean,
        'var': emp_var,
        'expected_mean': mean,
        'expected_var': var,
        'mean_z': mean_z,
        'var_z': var_z,
        'passed': abs(mean_z) < Z_TOLERANCE and abs(var_z) < Z_TOLERANCE,
    }


def mc_transition_check(sched, x0, y, t, n, generator=None):
    r"""
    Compose q(x_{t-1} | x0, y) with the one-step kernel q(x_t | x_{t-1}, y) and
    compare with the marginal q(x_t | x0, y).
    """
    kernel = transition_kernel(sched, t)
    x0s = torch.full((n,), float(x0), dtype=torch.float64)
    ys = torch.full((n,), float(y), dtype=torch.float64)
    prev = forward_sample(sched, x0s, ys, t - 1, generator).x_t
    noise = torch.randn(n, generator=generator, dtype=torch.float64)
    x_t = kernel.a * prev + kernel.b * ys + math.sqrt(kernel.var) * noise
    m = float(sched.m[t])
    report = _law_check(x_t, (1 - m) * float(x0) + m * float(y), float(sched.delta[t]))
    report.update(t=t, n=n, check='transition')
    return report


def mc_posterior_check(sched, x0, y, t, n, generator=None):
    r"""
    Draw x_t ~ q(x_t | x0, y), then x_{t-1} from the reverse posterior with the
    true x0, and compare with q(x_{t-1} | x0, y).
    """
    coef = pair_coefficients(sched, t, t - 1)
    x0s = torch.full((n,), float(x0), dtype=torch.float64)
    ys = torch.full((n,), float(y), dtype=torch.float64)
    x_t = forward_sample(sched, x0s, ys, t, generator).x_t
    noise = torch.randn(n, generator=generator, dtype=torch.float64)
    prev = coef.c_x * x_t + coef.c_y * ys - coef.c_eps * (x_t - x0s) + \
        math.sqrt(coef.delta_tilde) * noise
    m = float(sched.m[t - 1])
    report = _law_check(prev, (1 - m) * float(x0) + m * float(y), float(sched.delta[t - 1]))
    report.update(t=t, n=n, check='posterior')
    return report


def posterior_regression(sched, t, n, generator=None):
    r"""
    Least-squares fit of E[x_{t-1} | x_t, x0, y] from forward-composed samples.

    Samples x0, y ~ N(0, 1), x_{t-1} ~ q(x_{t-1} | x0, y) and x_t through the
    one-step kernel, then regresses x_{t-1} on (x_t, x0, y). The fitted x0
    coefficient estimates c_eps[t] and the residual variance delta_tilde[t].
    """
    if not 2 <= t <= sched.T - 1:
        raise ValueError(f"regression needs 2 <= t <= {sched.T - 1}, got {t}")
    kernel = transition_kernel(sched, t)
    x0 = torch.randn(n, generator=generator, dtype=torch.float64)
    y = torch.randn(n, generator=generator, dtype=torch.float64)
    prev = forward_sample(sched, x0, y, t - 1, generator).x_t
    noise = torch.randn(n, generator=generator, dtype=torch.float64)
    x_t = kernel.a * prev + kernel.b * y + math.sqrt(kernel.var) * noise

    design = torch.stack([x_t, x0, y], dim=1)
    fit = torch.linalg.lstsq(design, prev.unsqueeze(1)).solution.squeeze(1)
    residual = prev - design @ fit
    sigma2 = float(residual.pow(2).sum()) / (n - 3)
    se = (sigma2 * torch.linalg.inv(design.T @ design).diagonal()).sqrt()

    c_x, c_y, c_eps = (float(sched.c_x[t]), float(sched.c_y[t]), float(sched.c_eps[t]))
    expected = torch.tensor([c_x - c_eps, c_eps, c_y], dtype=torch.float64)
    z = (fit - expected) / se
    return {
        't': t,
        'n': n,
        'fitted': fit.tolist(),
        'expected': expected.tolist(),
        'z': z.tolist(),
        'c_eps_fit': float(fit[1]),
        'c_eps': c_eps,
        'residual_var': sigma2,
        'delta_tilde': float(sched.delta_tilde[t]),
        'passed': bool(z.abs().max() < Z_TOLERANCE),
    }
