"""Neural-network primitives built on :mod:`point2vec.numerics.tensor`.

Layer norm, softmax and GELU have hand-written fused backward passes;
everything else is composed from tensor ops.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .tensor import Tensor, _result, as_tensor, matmul

_GELU_C = math.sqrt(2.0 / math.pi)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def layer_norm(x: Tensor, eps: float = 1e-5, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalize over the last axis with population variance."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, weight, bias) if t is not None)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=lead) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data if weight is not None else g
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    return _result(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    sq = d * d
    t = sq * (_GELU_C * 0.044715)
    t += _GELU_C
    t *= d
    np.tanh(t, out=t)
    out = t + 1.0
    out *= d
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 a x^2)
        dinner = sq * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        one_minus = t * t
        np.subtract(1.0, one_minus, out=one_minus)
        dinner *= one_minus
        dinner *= d
        dinner += t
        dinner += 1.0
        dinner *= 0.5
        dinner *= g
        return (dinner,)

    return _result(out, (x,), backward)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"drop rate must lie in [0, 1), got {rate}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(keep, dtype=x.dtype) / (1.0 - rate)
    return x * Tensor(scale.astype(x.dtype))


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero the whole branch of a sample (axis 0) with probability ``rate``."""
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape[0]) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    return x * Tensor(scale)


def smooth_l1(pred: Tensor, target, beta: float = 2.0) -> Tensor:
    """Mean Smooth L1 loss; ``target`` is treated as a constant."""
    if beta <= 0:
        raise ParameterError(f"smooth_l1 beta must be > 0, got {beta}")
    pred = as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray(elem.mean(), dtype=pred.dtype)
    if not np.isfinite(out):
        raise NumericError("smooth_l1 produced a non-finite loss")
    n = d.size

    def backward(g):
        local = np.where(small, d / beta, np.sign(d))
        return (g * local / n,)

    return _result(out, (pred,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over rows of ``logits`` (…, C).

    With smoothing ``eps`` the target puts ``1 - eps`` on the true class and
    ``eps / (C - 1)`` on every other class.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ParameterError(f"label smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"label out of range [0, {num_classes})")
    target = np.zeros(logits.shape, dtype=logits.dtype)
    if num_classes > 1:
        target += smoothing / (num_classes - 1)
    np.put_along_axis(target, labels[..., None], 1.0 - smoothing if num_classes > 1 else 1.0, axis=-1)
    logp = log_softmax(logits, axis=-1)
    loss = -(logp * Tensor(target)).sum(axis=-1)
    return loss.mean()
