"""Differentiable dense operations on :class:`Tensor`.

Every function accepts tensors or array-likes and returns a new tensor. Binary
operations broadcast numpy-style (right-aligned dimensions, size-1 or missing
axes); gradients are summed back to the operand shapes.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .tensor import ContractError, DimensionError, DomainError, Tensor, as_tensor

_from_op = Tensor._from_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _from_op(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _from_op(a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _from_op(out, (a, b), bw, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


# -- elementwise unary ------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _from_op(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0  # subgradient at 0 is 0
    return _from_op(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,),
                    lambda g: (g * pos,), "relu")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {"sigmoid": sigmoid, "exp": exp, "relu": relu, "add": add, "mul": mul, "scale": scale}


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch by name: sigmoid, exp, relu (unary); add, mul (binary); scale (by a constant)."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "mul", "scale"):
        if other is None:
            raise ContractError(f"{kind} needs a second operand")
        return _ELEMENTWISE[kind](x, other)
    return _ELEMENTWISE[kind](x)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    if x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _from_op(out, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis, then apply elementwise affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = gxh = None
        if x.requires_grad:
            gxh = g * gd
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _from_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W (+ b)`` over the trailing axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: x shape {x.shape} incompatible with W shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    parents: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match W shape {W.shape}")
        out = out + b.data
        parents = (x, W, b)
    Wd = W.data

    def bw(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _from_op(out.reshape(lead + (Wd.shape[1],)), parents, bw, "linear")


def sparse_matmul(x, M: sp.spmatrix) -> Tensor:
    """``x @ M`` over the trailing axis with a constant sparse matrix ``M``."""
    x = as_tensor(x)
    if x.shape[-1] != M.shape[0]:
        raise DimensionError(f"sparse_matmul: x shape {x.shape} incompatible with M shape {M.shape}")
    Mt = sp.csr_matrix(M.T)
    Mc = sp.csr_matrix(M)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, M.shape[0])
    out = np.asarray(Mt @ x2.T).T.astype(x.dtype, copy=False)

    def bw(g):
        g2 = g.reshape(-1, M.shape[1])
        return (np.asarray(Mc @ g2.T).T.astype(g.dtype, copy=False).reshape(x.shape),)

    return _from_op(np.ascontiguousarray(out).reshape(lead + (M.shape[1],)), (x,), bw, "sparse_matmul")


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _from_op(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _from_op(x.data[idx], (x,), bw, "getitem")


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _from_op(np.stack([t.data for t in xs], axis=axis), tuple(xs), bw, "stack")


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _from_op(np.flip(x.data, axis=axis).copy(), (x,),
                    lambda g: (np.flip(g, axis=axis),), "flip")


def cumsum(x, axis: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _from_op(np.cumsum(x.data, axis=axis), (x,), bw, "cumsum")


def reverse_cumsum(x, axis: int) -> Tensor:
    """``out[j] = sum_{k >= j} x[k]`` along ``axis``."""
    return flip(cumsum(flip(x, axis), axis), axis)


def pad(x, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for :func:`numpy.pad`."""
    x = as_tensor(x)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _from_op(np.pad(x.data, pad_width), (x,), lambda g: (g[sl],), "pad")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _from_op(out, (x,), bw, "upsample2x")


# -- convolution ------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: (B, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, Cin, H, W_ = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1).reshape(-1, Cin)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, Cin * kh * kw)
    W2 = w.data.reshape(Cout, -1)
    out = cols @ W2.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((g2 @ W2).reshape(B, Ho, Wo, Cin, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W_] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def custom(data: np.ndarray, parents, backward, op: str = "custom") -> Tensor:
    """Wrap a hand-written forward/backward pair as a graph node."""
    return _from_op(data, tuple(as_tensor(p) for p in parents), backward, op)


def sqrt_inv_width(d: int) -> float:
    if d <= 0:
        raise DomainError("inner width must be positive")
    return 1.0 / math.sqrt(d)
