from dataclasses import dataclass

import torch

from .tensor import ShapeError

__all__ = ['BridgeDraw', 'forward_sample', 'loss_target', 'posterior_mean']


@dataclass
class BridgeDraw:
    r"""
    One forward bridge draw. `t` is an int or a LongTensor of per-item
    timesteps aligned with the leading axis of `x_t`.
    """
    x_t: torch.Tensor
    eps: torch.Tensor
    t: object


def _check_pair(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(sched, name, t, like):
    r"""
    Look up schedule entries at `t` and shape them to broadcast against `like`.
    """
    table = sched.as_tensor(name, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        assert t.numel() == like.size(0), \
            f"got {t.numel()} timesteps for a batch of {like.size(0)}"
        return table[t.long().to(like.device)].view(-1, *([1] * (like.dim() - 1)))
    return table[int(t)]


def _check_t(sched, t, lo=0):
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.numel() == 0:
            raise ValueError("empty timestep tensor")
        sched.check_timestep(int(t.min()), lo)
        sched.check_timestep(int(t.max()), lo)
    else:
        sched.check_timestep(int(t), lo)


def forward_sample(sched, x0, y, t, generator=None, eps=None):
    r"""
    Draw x_t ~ q(x_t | x0, y) = N((1 - m_t) x0 + m_t y, delta_t I).

    Args:
        sched (`BridgeSchedule`):
            Bridge schedule.
        x0 (`torch.Tensor`):
            Target endpoint.
        y (`torch.Tensor`):
            Control endpoint, same shape as `x0`.
        t (`int` or `torch.LongTensor`):
            Timestep, or one timestep per leading-axis item.
        generator (`torch.Generator`, *optional*):
            Random stream for the Gaussian draw.
        eps (`torch.Tensor`, *optional*):
            Replayed Gaussian draw. Drawn from `generator` when None.

    Returns:
        BridgeDraw
    """
    _check_pair(x0, y, 'forward_sample')
    _check_t(sched, t)
    if eps is None:
        eps = torch.randn(
            x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    else:
        _check_pair(x0, eps, 'forward_sample')
    m = _coef(sched, 'm', t, x0)
    std = _coef(sched, 'delta', t, x0)
    std = std.sqrt() if isinstance(std, torch.Tensor) else std**0.5
    x_t = (1 - m) * x0 + m * y + std * eps
    # endpoints are exact: m_0 = 0, m_T = 1 and delta_0 = delta_T = 0
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        if int(t) == 0:
            x_t = x0.clone()
        elif int(t) == sched.T:
            x_t = y.clone()
    return BridgeDraw(x_t, eps, t)


def loss_target(sched, x0, y, draw):
    r"""
    Regression target m_t (y - x0) + sqrt(delta_t) eps of the denoiser, which
    equals x_t - x0.
    """
    _check_pair(x0, y, 'loss_target')
    _check_pair(x0, draw.eps, 'loss_target')
    m = _coef(sched, 'm', draw.t, x0)
    std = _coef(sched, 'delta', draw.t, x0)
    std = std.sqrt() if isinstance(std, torch.Tensor) else std**0.5
    return m * (y - x0) + std * draw.eps


def posterior_mean(sched, x_t, y, eps_pred, t):
    r"""
    Reverse mean c_x[t] x_t + c_y[t] y - c_eps[t] eps_pred for the adjacent
    step t -> t - 1.
    """
    _check_pair(x_t, y, 'posterior_mean')
    _check_pair(x_t, eps_pred, 'posterior_mean')
    _check_t(sched, t, lo=1)
    c_x = _coef(sched, 'c_x', t, x_t)
    c_y = _coef(sched, 'c_y', t, x_t)
    c_eps = _coef(sched, 'c_eps', t, x_t)
    return c_x * x_t + c_y * y - c_eps * eps_pred
