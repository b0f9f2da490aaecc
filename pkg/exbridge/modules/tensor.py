import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F

__all__ = [
    'ShapeError',
    'precision',
    'matmul',
    'add',
    'sub',
    'mul',
    'scale',
    'concat',
    'chunk',
    'softmax',
    'silu',
    'layernorm',
    'mean',
    'reshape',
    'transpose',
    'backward',
    'gradcheck',
    'directional_gradcheck',
]


class ShapeError(ValueError):
    pass


@contextmanager
def precision(dtype):
    r"""
    Select the floating point mode for tensors created inside the block.

    Storage defaults to float32; float64 is the verification mode used by the
    gradient checks and the bit-reproducibility tests.
    """
    if isinstance(dtype, str):
        dtype = {'float32': torch.float32, 'float64': torch.float64}[dtype]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        if a.dim() == 0 or b.dim() == 0:
            return
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a, b):
    if a.dim() < 2 or b.dim() < 2 or a.size(-1) != b.size(-2):
        raise ShapeError(
            f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a, b):
    _same_shape(a, b, 'add')
    return a + b


def sub(a, b):
    _same_shape(a, b, 'sub')
    return a - b


def mul(a, b):
    _same_shape(a, b, 'mul')
    return a * b


def scale(x, alpha):
    return x * alpha


def concat(tensors, axis):
    ref = tensors[0]
    for u in tensors[1:]:
        if u.dim() != ref.dim() or any(
                u.size(i) != ref.size(i) for i in range(ref.dim()) if i != axis % ref.dim()):
            raise ShapeError(
                f"concat: shapes {tuple(ref.shape)} and {tuple(u.shape)} differ off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def chunk(x, parts, axis):
    r"""
    Split `x` into `parts` equal pieces along `axis`. Unlike `torch.chunk` an
    axis length not divisible by `parts` is an error.
    """
    if parts < 1 or x.size(axis) % parts != 0:
        raise ShapeError(
            f"chunk: axis {axis} of length {x.size(axis)} is not divisible into {parts} parts")
    return list(torch.chunk(x, parts, dim=axis))


def softmax(x, axis=-1):
    # accumulate in float64 when storage is float32
    return torch.softmax(x, dim=axis, dtype=torch.float64).to(x.dtype)


def silu(x):
    return F.silu(x)


def layernorm(x, gain=None, bias=None, axis=-1, eps=1e-6):
    if axis not in (-1, x.dim() - 1):
        x = x.transpose(axis, -1)
    out = F.layer_norm(x, x.shape[-1:], gain, bias, eps)
    if axis not in (-1, out.dim() - 1):
        out = out.transpose(axis, -1)
    return out


def mean(x, axis=None):
    if axis is None:
        return x.mean(dtype=torch.float64).to(x.dtype)
    return x.mean(dim=axis, dtype=torch.float64).to(x.dtype)


def reshape(x, shape):
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {tuple(shape)}")
    return x.reshape(shape)


def transpose(x, dim0=-2, dim1=-1):
    return x.transpose(dim0, dim1)


def backward(loss):
    r"""
    Populate `.grad` on every reachable leaf. Gradients add up across repeated
    calls until the leaves are zeroed.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def gradcheck(fn, inputs, h=1e-4, rtol=1e-4, atol=1e-6):
    r"""
    Central finite-difference check of every input of `fn` in float64.

    Returns:
        bool, True when analytic and numeric Jacobians agree.
    """
    inputs = tuple(
        u.detach().to(torch.float64).requires_grad_(True) for u in inputs)
    return torch.autograd.gradcheck(
        fn, inputs, eps=h, atol=atol, rtol=rtol, raise_exception=False)


def directional_gradcheck(loss_fn, named_params, generator=None, h=1e-4):
    r"""
    Compare autodiff gradients with a central difference along one random
    direction per named parameter.

    Args:
        loss_fn (`callable`):
            Zero-argument closure returning a scalar loss of the parameters.
        named_params (`iterable` of (`str`, `Parameter`)):
            Parameters to check, float64.
        generator (`torch.Generator`, *optional*):
            Source of the random directions.
        h (`float`, *optional*, defaults to 1e-4):
            Finite difference step.

    Returns:
        dict mapping parameter name to relative error.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    backward(loss_fn())
    errors = {}
    with torch.no_grad():
        for name, p in named_params:
            grad = torch.zeros_like(p) if p.grad is None else p.grad.clone()
            v = torch.randn(p.shape, generator=generator, dtype=p.dtype)
            v = v / v.norm()
            p.add_(h * v)
            up = float(loss_fn())
            p.sub_(2 * h * v)
            down = float(loss_fn())
            p.add_(h * v)
            numeric = (up - down) / (2 * h)
            analytic = float((grad * v).sum())
            denom = max(abs(numeric), abs(analytic), 1e-6)
            errors[name] = abs(numeric - analytic) / denom
    return errors
