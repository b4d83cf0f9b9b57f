"""Differentiable operations on 4-D tensors.

Convolutions use im2col + BLAS matmul.  `conv_transpose2d` shares the
same im2col/col2im kernels with the roles of forward and backward
exchanged, so it is the exact adjoint of `conv2d` by construction:
<u, conv(x)> == <conv_T(u), x> to round-off for matching weights.

Padding semantics ("same" geometry): total pad = kernel - stride split
left-biased, output extent = input extent / stride (stride must divide).
Modes: "circular" (periodic domains - the default everywhere in this
package), "zero", "reflect".

Elementwise binaries support numpy broadcasting between 4-D shapes; the
backward pass sum-reduces gradients over the broadcast axes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, from_op

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "conv_transpose2d",
    "layer_norm",
    "grn",
    "gelu",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "mse",
    "concat",
    "slice_channels",
    "astype",
]

_NP_PAD_MODE = {"circular": "wrap", "zero": "constant", "reflect": "reflect"}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _check_dtypes(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(
            f"mixed dtypes {sorted(d.name for d in dtypes)}; cast explicitly"
        )


def _pad_split(kernel: int, stride: int) -> tuple[int, int]:
    total = kernel - stride
    left = total // 2
    return left, total - left


def _pad2d(values: np.ndarray, pads, mode: str) -> np.ndarray:
    (ht, hb), (wl, wr) = pads
    if ht == hb == wl == wr == 0:
        return values
    return np.pad(
        values, ((0, 0), (0, 0), (ht, hb), (wl, wr)), mode=_NP_PAD_MODE[mode]
    )


def _fold_axis(arr: np.ndarray, left: int, right: int, size: int, mode: str,
               axis: int) -> np.ndarray:
    """Adjoint of padding one spatial axis: fold pad gradients back."""

    def seg(a, source, lo, hi):
        idx = [slice(None)] * 4
        idx[axis] = slice(lo, hi)
        return (arr if source else a)[tuple(idx)]

    core = seg(None, True, left, left + size)
    if mode == "zero" or (left == 0 and right == 0):
        return core
    core = core.copy()
    if mode == "circular":
        # padded index p reads source (p - left) % size, so fold each margin
        # back in contiguous chunks; handles pads wider than the extent too
        for lo, hi in ((0, left), (left + size, left + size + right)):
            p = lo
            while p < hi:
                src = (p - left) % size
                take = min(hi - p, size - src)
                seg(core, False, src, src + take)[...] += seg(
                    None, True, p, p + take
                )
                p += take
    elif mode == "reflect":
        # padded[j] = x[left - j] on the left, x[size - 2 - j] on the right
        if left:
            seg(core, False, 1, left + 1)[...] += np.flip(
                seg(None, True, 0, left), axis=axis
            )
        if right:
            seg(core, False, size - right - 1, size - 1)[...] += np.flip(
                seg(None, True, left + size, left + size + right), axis=axis
            )
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return core


def _check_geometry(H: int, W: int, kh: int, kw: int, stride: int, mode: str):
    if stride < 1 or kh < stride or kw < stride:
        raise ValueError(f"need kernel >= stride >= 1, got k=({kh},{kw}) s={stride}")
    if H % stride or W % stride:
        raise ValueError(f"stride {stride} must divide spatial extent ({H},{W})")
    if mode not in _NP_PAD_MODE:
        raise ValueError(f"unknown padding mode {mode!r}")
    if mode == "reflect" and (_pad_split(kh, stride)[0] >= H or
                              _pad_split(kw, stride)[0] >= W):
        raise ValueError("reflect padding needs pad < extent")


def _im2col(values: np.ndarray, kh: int, kw: int, stride: int, mode: str):
    """Patch matrix (N*Ho*Wo, C*kh*kw) of strided kernel windows."""
    N, C, H, W = values.shape
    padded = _pad2d(values, (_pad_split(kh, stride), _pad_split(kw, stride)), mode)
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def _col2im(dwin: np.ndarray, stride: int, mode: str, H: int, W: int) -> np.ndarray:
    """Adjoint of `_im2col`: scatter windows back onto the (H, W) plane.

    `dwin` has shape (N, Ho, Wo, C, kh, kw).
    """
    N, Ho, Wo, C, kh, kw = dwin.shape
    ph, pw = _pad_split(kh, stride), _pad_split(kw, stride)
    canvas = np.zeros((N, C, H + kh - stride, W + kw - stride), dtype=dwin.dtype)
    dwin_t = dwin.transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            canvas[:, :, u:u + stride * Ho:stride,
                   v:v + stride * Wo:stride] += dwin_t[:, :, :, :, u, v]
    folded = _fold_axis(canvas, ph[0], ph[1], H, mode, axis=2)
    return _fold_axis(folded, pw[0], pw[1], W, mode, axis=3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "circular") -> Tensor:
    """2-D convolution (cross-correlation), weight (O, C, kh, kw).

    Output is (N, O, H/stride, W/stride); bias, if given, is (1, O, 1, 1).
    """
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"weight expects {Cw} input channels, tensor has {C}")
    if b is not None and b.shape != (1, O, 1, 1):
        raise ValueError(f"bias must be (1, {O}, 1, 1), got {b.shape}")
    _check_dtypes(*(t for t in (x, w, b) if t is not None))
    _check_geometry(H, W, kh, kw, stride, padding)

    cols, Ho, Wo = _im2col(x.values, kh, kw, stride, padding)
    w2 = w.values.reshape(O, -1)
    out = (cols @ w2.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.values

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dwin = (g2 @ w2).reshape(N, Ho, Wo, C, kh, kw)
            dx = _col2im(dwin, stride, padding, H, W)
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3), keepdims=True) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, backward_fn)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: str = "circular") -> Tensor:
    """Transposed convolution, weight (C_in, C_out, kh, kw).

    Exact adjoint of `conv2d` with the same weight viewed as
    (O=C_in, C=C_out, kh, kw): maps (N, C_in, H, W) to
    (N, C_out, H*stride, W*stride).
    """
    N, Ci, Hi, Wi = x.shape
    Cw, Co, kh, kw = w.shape
    if Cw != Ci:
        raise ValueError(f"weight expects {Cw} input channels, tensor has {Ci}")
    if b is not None and b.shape != (1, Co, 1, 1):
        raise ValueError(f"bias must be (1, {Co}, 1, 1), got {b.shape}")
    _check_dtypes(*(t for t in (x, w, b) if t is not None))
    Ho, Wo = Hi * stride, Wi * stride
    _check_geometry(Ho, Wo, kh, kw, stride, padding)

    x2 = x.values.transpose(0, 2, 3, 1).reshape(-1, Ci)
    wf = w.values.reshape(Ci, -1)
    dwin = (x2 @ wf).reshape(N, Hi, Wi, Co, kh, kw)
    out = _col2im(dwin, stride, padding, Ho, Wo)
    if b is not None:
        out = out + b.values

    def backward_fn(g):
        cols_g, _, _ = _im2col(g, kh, kw, stride, padding)
        dx = None
        if x.requires_grad:
            dx = (cols_g @ wf.T).reshape(N, Hi, Wi, Ci).transpose(0, 3, 1, 2)
            dx = np.ascontiguousarray(dx)
        dw = (x2.T @ cols_g).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3), keepdims=True) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, backward_fn)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     padding: str = "circular") -> Tensor:
    """Per-channel (grouped, groups = C) convolution, weight (C, 1, kh, kw).

    Evaluated as a sum over kernel offsets of shifted-plane FMAs rather
    than im2col: for large kernels the patch matrix would dwarf the data.
    """
    N, C, H, W = x.shape
    Cw, one, kh, kw = w.shape
    if Cw != C or one != 1:
        raise ValueError(f"depthwise weight must be ({C}, 1, kh, kw), got {w.shape}")
    if b is not None and b.shape != (1, C, 1, 1):
        raise ValueError(f"bias must be (1, {C}, 1, 1), got {b.shape}")
    _check_dtypes(*(t for t in (x, w, b) if t is not None))
    _check_geometry(H, W, kh, kw, 1, padding)

    wv = w.values[:, 0]
    padded = _pad2d(x.values, (_pad_split(kh, 1), _pad_split(kw, 1)), padding)
    out = np.zeros_like(x.values)
    for u in range(kh):
        for v in range(kw):
            out += padded[:, :, u:u + H, v:v + W] * wv[None, :, u, v, None, None]
    if b is not None:
        out += b.values

    def backward_fn(g):
        dw = None
        if w.requires_grad:
            dw = np.empty_like(w.values)
            for u in range(kh):
                for v in range(kw):
                    dw[:, 0, u, v] = np.sum(
                        padded[:, :, u:u + H, v:v + W] * g, axis=(0, 2, 3)
                    )
        dx = None
        if x.requires_grad:
            ph, pw = _pad_split(kh, 1), _pad_split(kw, 1)
            canvas = np.zeros(
                (N, C, H + kh - 1, W + kw - 1), dtype=x.dtype
            )
            for u in range(kh):
                for v in range(kw):
                    canvas[:, :, u:u + H, v:v + W] += (
                        g * wv[None, :, u, v, None, None]
                    )
            dx = _fold_axis(canvas, ph[0], ph[1], H, padding, axis=2)
            dx = _fold_axis(dx, pw[0], pw[1], W, padding, axis=3)
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3), keepdims=True) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Channel-mixing affine map (pointwise 1x1 conv), weight (O, C, 1, 1)."""
    N, C, H, W = x.shape
    O, Cw = w.shape[0], w.shape[1]
    if w.shape[2:] != (1, 1) or Cw != C:
        raise ValueError(f"linear weight must be (O, {C}, 1, 1), got {w.shape}")
    if b is not None and b.shape != (1, O, 1, 1):
        raise ValueError(f"bias must be (1, {O}, 1, 1), got {b.shape}")
    _check_dtypes(*(t for t in (x, w, b) if t is not None))
    w2 = w.values.reshape(O, C)
    out = np.tensordot(x.values, w2, axes=([1], [1])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.values

    def backward_fn(g):
        dx = None
        if x.requires_grad:
            dx = np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2)
            dx = np.ascontiguousarray(dx)
        dw = None
        if w.requires_grad:
            gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
            xm = x.values.transpose(1, 0, 2, 3).reshape(C, -1)
            dw = (gm @ xm.T).reshape(w.shape)
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3), keepdims=True) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the channel axis, independently at every (n, h, w)."""
    C = x.shape[1]
    if gamma.shape != (1, C, 1, 1) or beta.shape != (1, C, 1, 1):
        raise ValueError(f"gamma/beta must be (1, {C}, 1, 1)")
    _check_dtypes(x, gamma, beta)
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = gamma.values * y + beta.values

    def backward_fn(g):
        dgamma = None
        if gamma.requires_grad:
            dgamma = (g * y).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = None
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dx = None
        if x.requires_grad:
            dy = g * gamma.values
            dx = inv * (
                dy
                - dy.mean(axis=1, keepdims=True)
                - y * (dy * y).mean(axis=1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return from_op(out, (x, gamma, beta), backward_fn)


def grn(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Global response normalization (ConvNeXt-V2).

    Per (sample, channel) spatial L2 norms G are divisively normalized by
    their channel mean: out = gamma * (x * G / (mean_C(G) + eps)) + beta + x.
    With gamma = beta = 0 this is the identity (the init state).
    """
    C = x.shape[1]
    if gamma.shape != (1, C, 1, 1) or beta.shape != (1, C, 1, 1):
        raise ValueError(f"gamma/beta must be (1, {C}, 1, 1)")
    _check_dtypes(x, gamma, beta)
    xv = x.values
    gx = np.sqrt((xv * xv).sum(axis=(2, 3), keepdims=True))
    inv = 1.0 / (gx.mean(axis=1, keepdims=True) + eps)
    nx = gx * inv
    scaled = xv * nx
    out = gamma.values * scaled + beta.values + xv

    def backward_fn(g):
        dgamma = None
        if gamma.requires_grad:
            dgamma = (g * scaled).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = None
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dx = None
        if x.requires_grad:
            t = gamma.values * (g * xv).sum(axis=(2, 3), keepdims=True)
            s = (t * gx).sum(axis=1, keepdims=True)
            dgx = t * inv - s * (inv * inv) / C
            gx_safe = np.where(gx > 0.0, gx, 1.0)
            dx = g * (gamma.values * nx + 1.0) + dgx * (xv / gx_safe) * (gx > 0.0)
        return dx, dgamma, dbeta

    return from_op(out, (x, gamma, beta), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    out = xv * cdf

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (cdf + xv * pdf),)

    return from_op(out, (x,), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, fwd, da_fn, db_fn) -> Tensor:
    _check_dtypes(a, b)
    out = fwd(a.values, b.values)

    def backward_fn(g):
        da = _unbroadcast(da_fn(g), a.shape) if a.requires_grad else None
        db = _unbroadcast(db_fn(g), b.shape) if b.requires_grad else None
        return da, db

    return from_op(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b (numpy broadcasting between 4-D shapes)."""
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b."""
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b."""
    return _binary(
        a, b, np.multiply, lambda g: g * b.values, lambda g: g * a.values
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """x * python-float factor (dtype-preserving)."""
    factor = float(factor)
    out = x.values * factor

    def backward_fn(g):
        return (g * factor if x.requires_grad else None,)

    return from_op(out, (x,), backward_fn)


def _scalar(value, dtype) -> np.ndarray:
    return np.asarray(value, dtype=dtype).reshape(1, 1, 1, 1)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1, 1, 1) tensor."""
    out = _scalar(x.values.sum(dtype=x.dtype), x.dtype)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return from_op(out, (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all entries as a (1, 1, 1, 1) tensor."""
    size = x.values.size
    out = _scalar(x.values.sum(dtype=x.dtype) / size, x.dtype)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gg = np.broadcast_to(g / size, x.shape).astype(x.dtype, copy=True)
        return (gg,)

    return from_op(out, (x,), backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries, scalar-shaped output."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    size = diff.size
    out = _scalar(np.sum(diff * diff, dtype=a.dtype) / size, a.dtype)

    def backward_fn(g):
        coeff = 2.0 * g / size
        da = (coeff * diff).astype(a.dtype) if a.requires_grad else None
        db = (-coeff * diff).astype(b.dtype) if b.requires_grad else None
        return da, db

    return from_op(out, (a, b), backward_fn)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along batch (0) or channel (1) axis."""
    if axis not in (0, 1):
        raise ValueError(f"concat supports axis 0 or 1, got {axis}")
    if not tensors:
        raise ValueError("concat of no tensors")
    _check_dtypes(*tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
            elif axis == 0:
                grads.append(g[lo:hi].copy())
            else:
                grads.append(g[:, lo:hi].copy())
        return grads

    return from_op(out, tuple(tensors), backward_fn)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Channels [lo, hi) of x."""
    C = x.shape[1]
    if not 0 <= lo < hi <= C:
        raise ValueError(f"bad channel slice [{lo}, {hi}) for C={C}")
    out = x.values[:, lo:hi].copy()

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        dx = np.zeros_like(x.values)
        dx[:, lo:hi] = g
        return (dx,)

    return from_op(out, (x,), backward_fn)


def astype(x: Tensor, dtype) -> Tensor:
    """Cast to float32/float64; gradients are cast back on the way down."""
    dtype = np.dtype(dtype)
    out = x.values.astype(dtype)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g.astype(x.dtype),)

    return from_op(out, (x,), backward_fn)
