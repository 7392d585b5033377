"""Differentiable kernels over :class:`Tensor`.

Each op computes its value with numpy, checks shapes, and (when needed)
records a closure returning one gradient per parent, ``None`` for parents
that need none.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from chunkcast.errors import DegenerateMaskError, DimensionError
from chunkcast.numerics.tensor import Tensor, as_tensor, make_result

MASK_NEG = -1e9


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_result(out, (a,), bw, "gelu")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return make_result(out, ts, bw, "concat")


def take(a, indices, axis: int) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array (duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        n = shape[axis]
        # move the gathered block to the front: g -> [idx.size, rest]
        pre, post = shape[:axis], shape[axis + 1:]
        gm = np.moveaxis(g.reshape(pre + (idx.size,) + post), axis, 0).reshape(idx.size, -1)
        flat = idx.reshape(-1)
        if gm.shape[1] <= 16:
            acc = np.stack([np.bincount(flat, weights=gm[:, j], minlength=n) for j in range(gm.shape[1])], axis=1)
        else:
            acc = np.zeros((n, gm.shape[1]), dtype=g.dtype)
            np.add.at(acc, flat, gm)
        acc = acc.reshape((n,) + pre + post)
        return (np.moveaxis(acc, 0, axis).astype(g.dtype, copy=False),)

    return make_result(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def scatter(a, indices, axis: int, size: int) -> Tensor:
    """Place slices of ``a`` at unique ``indices`` of a zero tensor of length ``size`` along ``axis``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise DimensionError("scatter indices must be unique")
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.data.dtype)
    sl = [slice(None)] * a.ndim
    sl[axis] = idx
    out[tuple(sl)] = a.data
    return make_result(out, (a,), lambda g: (np.take(g, idx, axis=axis),), "scatter")


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    return make_result(xhat, (a,), bw, "layer_norm")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (a,), bw, "softmax")


def mse(a, b) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    return mean(square(sub(a, b)))


_MASK_CACHE: dict = {}


def _mask_offsets(mask: np.ndarray, dtype) -> np.ndarray:
    key = (mask.shape, np.dtype(dtype).str, hash(np.packbits(mask).tobytes()))
    off = _MASK_CACHE.get(key)
    if off is None:
        if len(_MASK_CACHE) > 32:
            _MASK_CACHE.clear()
        off = np.where(mask, 0.0, MASK_NEG).astype(dtype)
        _MASK_CACHE[key] = off
    return off


def masked_attention(q, k, v, mask: np.ndarray | None = None, bias=None) -> Tensor:
    """Scaled dot-product attention restricted by a boolean key mask.

    Args:
        q: [..., Lq, D] queries.
        k: [..., Lk, D] keys.
        v: [..., Lk, Dv] values.
        mask: optional boolean [Lq, Lk]; ``mask[i, j]`` allows query i to see key j.
        bias: optional additive logit bias broadcastable to [..., Lq, Lk].

    Masked logits receive an additive -1e9 so the kernel has no branches.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    D = qd.shape[-1]
    if D <= 0 or kd.shape[-1] != D:
        raise DimensionError(f"query/key widths differ: {qd.shape} vs {kd.shape}")
    if kd.shape[-2] != vd.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {kd.shape} vs {vd.shape}")
    Lq, Lk = qd.shape[-2], kd.shape[-2]
    scale = 1.0 / math.sqrt(D)
    parents = [q, k, v]
    bd = None
    lead_shapes = [qd.shape[:-2], kd.shape[:-2], vd.shape[:-2]]
    if bias is not None:
        bias = as_tensor(bias)
        bd = bias.data
        if bd.ndim < 2 or bd.shape[-2:] != (Lq, Lk):
            raise DimensionError(f"bias shape {bd.shape} does not end in ({Lq}, {Lk})")
        lead_shapes.append(bd.shape[:-2])
        parents.append(bias)
    try:
        lead = np.broadcast_shapes(*lead_shapes)
    except ValueError as exc:
        raise DimensionError(f"attention batch shapes {lead_shapes} do not broadcast") from exc
    off = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (Lq, Lk):
            raise DimensionError(f"mask shape {mask.shape} != ({Lq}, {Lk})")
        if not mask.any(axis=1).all():
            row = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise DegenerateMaskError(f"query row {row} has no allowed key")
        off = _mask_offsets(mask, np.result_type(qd, kd))

    # work one leading slice at a time so the logits stay cache-resident
    sliced = len(lead) > 0
    n = lead[0] if sliced else 1
    Q = np.broadcast_to(qd, lead + (Lq, D))
    K = np.broadcast_to(kd, lead + (Lk, D))
    V = np.broadcast_to(vd, lead + vd.shape[-2:])
    Bb = np.broadcast_to(bd, lead + (Lq, Lk)) if bd is not None else None
    dtype = np.result_type(qd, kd, vd, *(() if bd is None else (bd,)))
    P = np.empty(lead + (Lq, Lk), dtype=dtype)
    out = np.empty(lead + (Lq, vd.shape[-1]), dtype=dtype)
    for i in range(n):
        sl = i if sliced else ()
        s = np.matmul(Q[sl], np.swapaxes(K[sl], -1, -2), out=P[sl])
        s *= scale
        if Bb is not None:
            s += Bb[sl]
        if off is not None:
            s += off
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        np.matmul(s, V[sl], out=out[sl])

    def bw(g):
        G = np.broadcast_to(g, out.shape)
        gq = np.empty(Q.shape, dtype) if q.requires_grad else None
        gk = np.empty(K.shape, dtype) if k.requires_grad else None
        gv = np.empty(V.shape, dtype) if v.requires_grad else None
        want_b = bias is not None and bias.requires_grad
        # bias shared along the sliced axis: accumulate instead of storing per slice
        b_shared = want_b and sliced and (bd.ndim - 2 < len(lead) or bd.shape[0] == 1)
        gb = None
        if want_b:
            gb = np.zeros(lead[1:] + (Lq, Lk), dtype) if b_shared else np.empty(P.shape, dtype)
        for i in range(n):
            sl = i if sliced else ()
            p, gi = P[sl], G[sl]
            if gv is not None:
                np.matmul(np.swapaxes(p, -1, -2), gi, out=gv[sl])
            ds = gi @ np.swapaxes(V[sl], -1, -2)
            ds -= np.einsum("...ij,...ij->...i", ds, p)[..., None]
            ds *= p
            if want_b:
                if b_shared:
                    gb += ds
                else:
                    gb[sl] = ds
            if gq is not None:
                np.matmul(ds, K[sl], out=gq[sl])
            if gk is not None:
                np.matmul(np.swapaxes(ds, -1, -2), Q[sl], out=gk[sl])
        if gq is not None:
            gq *= scale
        if gk is not None:
            gk *= scale
        grads = [
            _unbroadcast(gq, qd.shape) if gq is not None else None,
            _unbroadcast(gk, kd.shape) if gk is not None else None,
            _unbroadcast(gv, vd.shape) if gv is not None else None,
        ]
        if bias is not None:
            if not want_b:
                grads.append(None)
            elif b_shared:
                grads.append(_unbroadcast(gb, bd.shape) if bd.ndim - 2 < len(lead)
                             else _unbroadcast(gb[None], bd.shape))
            else:
                grads.append(_unbroadcast(gb, bd.shape))
        return tuple(grads)

    return make_result(out, parents, bw, "masked_attention")
