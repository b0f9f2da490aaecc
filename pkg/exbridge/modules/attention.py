import math

import torch

from .tensor import ShapeError, matmul, softmax

__all__ = ['attention']


def attention(q, k, v, softmax_scale=None, return_weights=False):
    r"""
    Multi-head softmax attention with an explicit score matrix.

    q:              [B, Lq, N, D].
    k:              [B, Lk, N, D].
    v:              [B, Lk, N, D].
    softmax_scale:  float. The scaling of QK^T before applying softmax.
                    Defaults to 1 / sqrt(D).
    return_weights: bool. Also return the [B, N, Lq, Lk] attention weights.
    """
    if q.dim() != 4 or k.shape != v.shape or q.shape[0] != k.shape[0] or \
            q.shape[2:] != k.shape[2:]:
        raise ShapeError(
            f"attention: incompatible q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    scale = softmax_scale if softmax_scale is not None else 1.0 / math.sqrt(q.size(-1))

    # [B, N, L, D]
    q, k, v = (u.transpose(1, 2) for u in (q, k, v))
    scores = matmul(q, k.transpose(-2, -1)) * scale
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v).transpose(1, 2).contiguous()
    if return_weights:
        return out, weights
    return out
