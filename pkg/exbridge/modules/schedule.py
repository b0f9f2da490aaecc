import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

__all__ = [
    'BridgeSchedule',
    'PairCoefficients',
    'LossWeight',
    'build_schedule',
    'pair_coefficients',
    'loss_weight',
    'to_csv',
    'CSV_HEADER',
]

CSV_HEADER = ('t', 'm', 'delta', 'delta_hat', 'delta_tilde', 'c_x', 'c_y', 'c_eps')


class PairCoefficients(NamedTuple):
    delta_hat: float
    delta_tilde: float
    c_x: float
    c_y: float
    c_eps: float


class LossWeight(NamedTuple):
    value: float
    near_inverse_t: bool


@dataclass(frozen=True)
class BridgeSchedule:
    r"""
    Closed-form Brownian bridge schedule, float64, read-only after construction.

    Every array has T + 1 entries indexed by the timestep. Entries of
    `delta_hat`, `delta_tilde`, `c_x`, `c_y` and `c_eps` at t = 0 are unused and
    hold zeros.
    """
    T: int
    s: float
    m: np.ndarray
    delta: np.ndarray
    delta_hat: np.ndarray
    delta_tilde: np.ndarray
    c_x: np.ndarray
    c_y: np.ndarray
    c_eps: np.ndarray

    def __post_init__(self):
        for name in CSV_HEADER[1:]:
            getattr(self, name).setflags(write=False)

    def check_timestep(self, t, lo=0):
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [{lo}, {self.T}]")

    def as_tensor(self, name, dtype=torch.float32, device='cpu'):
        r"""
        Downcast one coefficient array for use against tensors of `dtype`.
        """
        return torch.from_numpy(getattr(self, name).copy()).to(
            dtype=dtype, device=device)


def pair_coefficients(sched, t_cur, t_next):
    r"""
    Reverse-step coefficients from `t_cur` to any earlier pinned time `t_next`.

    The adjacent-step formulas hold for any earlier time, so a skip pair is
    evaluated by substituting m_{t_next}, delta_{t_next} for m_{t-1}, delta_{t-1}.
    At t_cur = T, delta_T = 0 and the 0/0 forms are replaced by their limits:
    (1 - m_t) / delta_t -> 1 / (2 s m_t) and delta_hat_t / delta_t -> 1.

    Returns:
        PairCoefficients(delta_hat, delta_tilde, c_x, c_y, c_eps)
    """
    sched.check_timestep(t_cur, lo=1)
    if not 0 <= t_next < t_cur:
        raise ValueError(f"t_next must be in [0, {t_cur}), got {t_next}")
    return _pair(sched.m, sched.delta, sched.s, sched.T, t_cur, t_next)


def _pair(m, delta, s, T, t_cur, t_next):
    m_t, d_t = float(m[t_cur]), float(delta[t_cur])
    m_n, d_n = float(m[t_next]), float(delta[t_next])

    if t_cur == T:
        # delta_hat_T = delta_T (= 0) since m_T = 1
        delta_hat = d_t
        ratio = d_n / (2.0 * s * m_t * (1.0 - m_n))
        c_x = ratio + (1.0 - m_n)
        c_y = m_n - m_t * ratio
        c_eps = 1.0 - m_n
        delta_tilde = d_n
        return PairCoefficients(delta_hat, delta_tilde, c_x, c_y, c_eps)

    delta_hat = d_t - d_n * ((1.0 - m_t) / (1.0 - m_n))**2
    delta_tilde = delta_hat * d_n / d_t
    c_x = (d_n / d_t) * (1.0 - m_t) / (1.0 - m_n) + (delta_hat / d_t) * (1.0 - m_n)
    c_y = m_n - m_t * (1.0 - m_t) / (1.0 - m_n) * (d_n / d_t)
    c_eps = (1.0 - m_n) * delta_hat / d_t
    return PairCoefficients(delta_hat, delta_tilde, c_x, c_y, c_eps)


def build_schedule(T, s=1.0):
    r"""
    Precompute the bridge schedule for `T` steps and variance factor `s`.

    m_t = t / T and delta_t = 2 s (m_t - m_t^2), so delta vanishes at both
    endpoints and peaks at s / 2 for t = T / 2.

    Args:
        T (`int`):
            Total diffusion steps, at least 2.
        s (`float`, *optional*, defaults to 1.0):
            Variance factor.

    Returns:
        BridgeSchedule
    """
    if isinstance(T, bool) or int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    s = float(s)
    if not math.isfinite(s) or s <= 0:
        raise ValueError(f"s must be finite and > 0, got {s}")
    T = int(T)

    t = np.arange(T + 1, dtype=np.float64)
    m = t / T
    delta = 2.0 * s * (m - m**2)
    # pin the endpoints exactly
    m[0], m[T] = 0.0, 1.0
    delta[0], delta[T] = 0.0, 0.0

    arrays = {name: np.zeros(T + 1, dtype=np.float64) for name in CSV_HEADER[3:]}
    for i in range(1, T + 1):
        coef = _pair(m, delta, s, T, i, i - 1)
        for name, value in coef._asdict().items():
            arrays[name][i] = value
    return BridgeSchedule(T, s, m, delta, **arrays)


def loss_weight(sched, t):
    r"""
    ELBO weight of the regression loss at timestep `t`, which is c_eps[t].

    `near_inverse_t` reports whether the weight is within 10% of 1 / t.
    """
    sched.check_timestep(t, lo=1)
    value = float(sched.c_eps[t])
    return LossWeight(value, abs(value - 1.0 / t) <= 0.1 / t)


def to_csv(sched, out=None):
    r"""
    Dump the schedule as CSV, one row per timestep, 17 significant digits.

    Args:
        out (`str` or text stream, *optional*):
            Destination path or stream. If None the CSV text is returned.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(CSV_HEADER)
    for i in range(sched.T + 1):
        writer.writerow([i] + [
            f"{float(getattr(sched, name)[i]):.17g}" for name in CSV_HEADER[1:]
        ])
    text = buffer.getvalue()
    if out is None:
        return text
    if isinstance(out, str):
        with open(out, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    else:
        out.write(text)
    return text
