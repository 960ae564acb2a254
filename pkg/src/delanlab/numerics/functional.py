"""Differentiable building blocks shared by the losses and encoders.

Conventions:
  * masks are boolean ndarrays, True = valid position;
  * every function accepts Tensors or array-likes and returns a Tensor;
  * softmax weights at invalid positions are exactly 0.0.

The frequently-used blocks (softmax family, layer norm, affine) are single
graph nodes with hand-written backward rules; composing them from
primitive ops costs 5-10x the Python overhead in the training hot path.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, _unbroadcast

NEG_INF = -np.inf


class EmptySupportError(ValueError):
    """Raised when a masked reduction has no valid position."""


def _as_mask(mask, shape=None) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if shape is not None and m.shape != shape:
        m = np.broadcast_to(m, shape)
    return m


def masked_softmax(v, mask, axis: int = -1) -> Tensor:
    """Softmax over the valid positions of `v` along `axis`.

    Output sums to 1 over valid positions and is exactly 0 elsewhere.
    Shift-invariant: the valid max is subtracted before exponentiation.
    """
    v = as_tensor(v)
    mask = _as_mask(mask, v.shape)
    if not mask.any(axis=axis).all():
        raise EmptySupportError("empty softmax support")
    guarded = np.where(mask, v.data, NEG_INF)
    shift = guarded.max(axis=axis, keepdims=True)
    z = np.exp(guarded - shift)
    p = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = p * g
        v._accumulate(inner - p * inner.sum(axis=axis, keepdims=True))

    return Tensor._node(p, (v,), backward)


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = np.exp(v.data - v.data.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = p * g
        v._accumulate(inner - p * inner.sum(axis=axis, keepdims=True))

    return Tensor._node(p, (v,), backward)


def log_softmax(v, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable log softmax; invalid positions get -inf logits."""
    v = as_tensor(v)
    data = v.data
    valid = None
    if mask is not None:
        valid = _as_mask(mask, v.shape)
        if not valid.any(axis=axis).all():
            raise EmptySupportError("empty softmax support")
        data = np.where(valid, data, NEG_INF)
    centered = data - data.max(axis=axis, keepdims=True)
    out = centered - np.log(np.exp(centered).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        grad = g - p * g.sum(axis=axis, keepdims=True)
        if valid is not None:
            grad = grad * valid
        v._accumulate(grad)

    return Tensor._node(out, (v,), backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product with fixed left-to-right accumulation.

    C is built by summing rank-1 terms A[:, k] B[k, :] for k = 0, 1, ...,
    which reproduces a naive triple loop bit-for-bit. Used wherever exact
    agreement with the loop oracle matters; encoder internals use the
    BLAS-backed ``@`` operator instead.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} x {b.shape}")

    def kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros((x.shape[0], y.shape[1]), dtype=x.dtype)
        for k in range(x.shape[1]):
            out = out + x[:, k:k + 1] * y[k:k + 1, :]
        return out

    data = kernel(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(kernel(g, b.data.T))
        if b.requires_grad:
            b._accumulate(kernel(a.data.T, g))

    return Tensor._node(data, (a, b), backward)


def mean_pool(m, mask) -> Tensor:
    """Arithmetic mean of the valid rows of a (rows x d) matrix."""
    m = as_tensor(m)
    mask = _as_mask(mask)
    if mask.shape != (m.shape[0],):
        raise ValueError("row mask length must equal the number of rows")
    count = int(mask.sum())
    if count == 0:
        raise EmptySupportError("mean_pool over zero valid rows")
    weights = mask.astype(m.dtype)[:, None]
    return (m * weights).sum(axis=0) * (1.0 / count)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    hat = centered / sigma
    out = hat * gain.data + bias.data

    def backward(g):
        if x.requires_grad:
            w = g * gain.data
            n = x.data.shape[-1]
            term = (w - w.mean(axis=-1, keepdims=True)
                    - hat * (w * hat).sum(axis=-1, keepdims=True) / n)
            x._accumulate(term / sigma)
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * hat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return Tensor._node(out, (x, gain, bias), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias) over the last axis; one fused graph node."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if bias is None:
        return x @ weight
    bias = as_tensor(bias)
    data = np.matmul(x.data, weight.data) + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(np.matmul(g, weight.data.T), x.data.shape))
        if weight.requires_grad:
            gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
            weight._accumulate(_unbroadcast(gw, weight.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return Tensor._node(data, (x, weight, bias), backward)
