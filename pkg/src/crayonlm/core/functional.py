"""Fused differentiable primitives: activations, normalization, losses."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import EmptyLossError, ShapeError
from .tensor import Tensor, _record

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _record(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale each row to unit root-mean-square, then apply a learned gain."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[-1]:
        raise ShapeError(f"rms_norm width mismatch {xd.shape} vs {wd.shape}")
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * wd

    def bw(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gx_hat = g * wd
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _record(out, (x, weight), bw)


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` match the leading
    shape. Positions with a false mask contribute neither value nor gradient,
    whatever their target id is.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(f"targets/mask shape {targets.shape}/{mask.shape} != logits lead {lead}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyLossError("loss mask selects no positions")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    sel = np.flatnonzero(mask.reshape(-1))
    tsel = targets.reshape(-1)[sel]
    if tsel.size and (tsel.min() < 0 or tsel.max() >= V):
        raise IndexError("target id out of vocabulary range")
    rows = flat[sel]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(len(sel)), tsel]
    loss = np.asarray(nll.sum(dtype=np.float64) / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(len(sel)), tsel] -= 1.0
        full = np.zeros_like(flat)
        full[sel] = p * (g / n)
        return (full.reshape(logits.shape),)

    return _record(loss, (logits,), bw)
