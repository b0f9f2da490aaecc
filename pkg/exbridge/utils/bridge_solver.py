import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import torch
from tqdm import tqdm

from ..modules.schedule import pair_coefficients
from ..modules.tensor import ShapeError

__all__ = [
    'InferencePlan',
    'ExemplarContext',
    'make_plan',
    'reverse_step',
    'generate',
]


@dataclass(frozen=True)
class InferencePlan:
    r"""
    Strictly decreasing timesteps visited by the reverse chain, starting at T.
    The chain takes one more, noiseless, step from the last entry to 0.
    """
    steps: tuple
    T: int
    deterministic_tail: bool = True
    clamped: bool = False

    @property
    def S(self):
        return len(self.steps)

    def pairs(self):
        r"""
        (t_cur, t_next) for every reverse step, ending with (t'_1, 0).
        """
        return list(zip(self.steps, self.steps[1:] + (0,)))


class ExemplarContext(NamedTuple):
    token: torch.Tensor
    feats: Optional[List[torch.Tensor]] = None


def make_plan(T, S):
    r"""
    Evenly spaced inference timesteps t_k = round(T - k T / S), k = 0..S-1,
    rounding halves up. Requests with S > T are clamped to the full plan.
    """
    if int(S) != S or S < 1:
        raise ValueError(f"sampling steps must be a positive integer, got {S}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T, S = int(T), int(S)
    clamped = False
    if S > T:
        logging.warning(f"Requested {S} sampling steps for T = {T}, using {T}")
        S, clamped = T, True

    # floor(T - k T / S + 1/2) in integer arithmetic
    steps = [(2 * T * (S - k) + S) // (2 * S) for k in range(S)]
    steps = tuple(sorted(set(u for u in steps if u >= 1), reverse=True))
    if len(steps) != S:
        logging.warning(f"Plan for T = {T}, S = {S} collapsed to {len(steps)} steps")
        clamped = True
    assert steps[0] == T, f"plan must start at T = {T}, got {steps[0]}"
    return InferencePlan(steps, T, clamped=clamped)


def reverse_step(sched, x_cur, y, eps_pred, t_cur, t_next, noise=None):
    r"""
    One reverse step x_{t_cur} -> x_{t_next}:
    c_x x_cur + c_y y - c_eps eps_pred + sqrt(delta_tilde) noise, with the
    coefficients of the pair (t_cur, t_next).

    Args:
        noise (`torch.Tensor`, *optional*):
            Standard normal draw; None means no noise. Must be zero or None when
            `t_next` is 0.
    """
    for name, u in (('y', y), ('eps_pred', eps_pred)):
        if u.shape != x_cur.shape:
            raise ShapeError(
                f"reverse_step: {name} shape {tuple(u.shape)} vs x {tuple(x_cur.shape)}")
    coef = pair_coefficients(sched, int(t_cur), int(t_next))
    x_next = coef.c_x * x_cur + coef.c_y * y - coef.c_eps * eps_pred
    if noise is not None:
        if noise.shape != x_cur.shape:
            raise ShapeError(
                f"reverse_step: noise shape {tuple(noise.shape)} vs x {tuple(x_cur.shape)}")
        if int(t_next) == 0:
            if bool(noise.ne(0).any()):
                raise ValueError("the final reverse step must be noiseless")
        else:
            x_next = x_next + coef.delta_tilde**0.5 * noise
    return x_next


def _draw_noise(like, generator):
    if isinstance(generator, (list, tuple)):
        assert len(generator) == like.size(0), \
            f"got {len(generator)} generators for a batch of {like.size(0)}"
        return torch.stack([
            torch.randn(like.shape[1:], generator=g, dtype=like.dtype)
            for g in generator
        ]).to(like.device)
    return torch.randn(
        like.shape, generator=generator, dtype=like.dtype).to(like.device)


@torch.no_grad()
def generate(sched,
             plan,
             denoiser,
             y,
             context=None,
             generator=None,
             noises=None,
             callback=None,
             progress=False):
    r"""
    Run the reverse bridge chain from x_T = y down `plan` and return x_0.

    Args:
        sched (`BridgeSchedule`):
            Bridge schedule the denoiser was trained on.
        plan (`InferencePlan`):
            Inference timesteps.
        denoiser (`callable`):
            denoiser(x_t, t, token, feats) -> predicted bridge target.
        y (`torch.Tensor`):
            Control endpoint.
        context (`ExemplarContext`, *optional*):
            Global token and exemplar features forwarded to the denoiser.
        generator (`torch.Generator` or list of them, *optional*):
            Noise stream, or one stream per batch element.
        noises (`list` of `torch.Tensor`, *optional*):
            Replayed noises, one per non-final step. Overrides `generator`.
        callback (`callable`, *optional*):
            callback(step_index, t_next, x_next), called after every step.
        progress (`bool`, *optional*, defaults to False):
            Show a progress bar.

    Returns:
        torch.Tensor with the shape of `y`
    """
    if plan.T != sched.T:
        raise ValueError(f"plan built for T = {plan.T}, schedule has T = {sched.T}")
    token, feats = context if context is not None else (None, None)
    pairs = plan.pairs()
    if noises is not None and len(noises) < len(pairs) - 1:
        raise ValueError(f"need {len(pairs) - 1} replayed noises, got {len(noises)}")

    x = y.clone()
    for i, (t_cur, t_next) in enumerate(tqdm(pairs, disable=not progress)):
        eps_pred = denoiser(x, t_cur, token, feats)
        # delta_tilde vanishes on the step into 0, so the tail is always noiseless
        if t_next == 0:
            noise = None
        elif noises is not None:
            noise = noises[i]
        else:
            noise = _draw_noise(x, generator)
        x = reverse_step(sched, x, y, eps_pred, t_cur, t_next, noise)
        assert bool(torch.isfinite(x).all()), f"non-finite state after step {t_cur} -> {t_next}"
        if callback is not None:
            callback(i, t_next, x)
    return x
