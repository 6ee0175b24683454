"""Differentiable primitives used by the networks and losses.

Convolutions run channel-last internally and reduce one kernel tap at a time
(kernel-major outer loop, channel contraction inside a GEMM), so results are
bit-reproducible for a fixed input.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_output

LEAKY_SLOPE = 0.2


# ----------------------------------------------------------------------------
# convolution helpers

def _cl(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 4, 1))


def _cf(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 4, 1, 2, 3))


def _pad_cl(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


# rows per block keep each tap's window and partial sums cache-resident
_BLOCK_VOXELS = 4096


def _blocks(n: int, depth: int, plane: int):
    chunk = max(1, _BLOCK_VOXELS // max(plane, 1))
    for i in range(n):
        for d0 in range(0, depth, chunk):
            yield i, d0, min(chunk, depth - d0)


def _window(a: np.ndarray, i: int, off, stride: int, d0: int, dn: int, hw: tuple[int, int]):
    """Strided tap window of sample ``i`` covering output rows ``d0:d0+dn``."""
    a0, b0, c0 = off
    h, w = hw
    lo = a0 + stride * d0
    return a[i, lo:lo + stride * (dn - 1) + 1:stride, b0:b0 + stride * (h - 1) + 1:stride,
             c0:c0 + stride * (w - 1) + 1:stride, :]


def _taps(k: int):
    return itertools.product(range(k), repeat=3)


def _matmul(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> np.ndarray:
    # BLAS is very slow for a contraction of length 1; that case is an outer product
    if a.shape[1] == 1:
        return np.multiply(a, b, out=out)
    return np.matmul(a, b, out=out)


def _gather(src: np.ndarray, taps: np.ndarray, stride: int, extent) -> np.ndarray:
    """out = sum_tap window(src) @ taps[tap]; src channel-last, taps [k,k,k,Cin,Cout]."""
    k, cin, cout = taps.shape[0], src.shape[-1], taps.shape[-1]
    n = src.shape[0]
    d, h, w = extent
    out = np.empty((n, d, h, w, cout), dtype=src.dtype)
    if cin == 1:
        # single input channel: one GEMM over a tap-major column block
        flat_taps = taps.reshape(k**3, cout)
        for i, d0, dn in _blocks(n, d, h * w):
            cols = np.empty((dn, h, w, k**3), dtype=src.dtype)
            for t, off in enumerate(_taps(k)):
                cols[..., t] = _window(src, i, off, stride, d0, dn, (h, w))[..., 0]
            out[i, d0:d0 + dn] = (cols.reshape(-1, k**3) @ flat_taps).reshape(dn, h, w, cout)
        return out
    for i, d0, dn in _blocks(n, d, h * w):
        acc = np.zeros((dn * h * w, cout), dtype=src.dtype)
        tmp = np.empty_like(acc)
        for off in _taps(k):
            win = np.ascontiguousarray(_window(src, i, off, stride, d0, dn, (h, w))).reshape(-1, cin)
            np.matmul(win, taps[off], out=tmp)
            acc += tmp
        out[i, d0:d0 + dn] = acc.reshape(dn, h, w, cout)
    return out


def _scatter(src: np.ndarray, taps: np.ndarray, stride: int, buf_extent) -> np.ndarray:
    """Adjoint of ``_gather``: add src @ taps[tap] into the strided windows of a buffer."""
    k, cin, cout = taps.shape[0], src.shape[-1], taps.shape[-1]
    n, d, h, w = src.shape[:4]
    buf = np.zeros((n, *buf_extent, cout), dtype=src.dtype)
    for i, d0, dn in _blocks(n, d, h * w):
        flat = src[i, d0:d0 + dn].reshape(-1, cin)
        tmp = np.empty((flat.shape[0], cout), dtype=src.dtype)
        for off in _taps(k):
            _matmul(flat, taps[off], tmp)
            _window(buf, i, off, stride, d0, dn, (h, w))[...] += tmp.reshape(dn, h, w, cout)
    return buf


def _tap_products(windowed: np.ndarray, dense: np.ndarray, k: int, stride: int, windowed_left: bool) -> np.ndarray:
    """sum over voxels of window(windowed)^T-products with ``dense``, per tap.

    ``dense`` is channel-last with the window extent; the result is
    [k,k,k,Cw,Cd] when ``windowed_left`` else [k,k,k,Cd,Cw].
    """
    n, d, h, w, cd = dense.shape
    cw = windowed.shape[-1]
    shape = (k, k, k, cw, cd) if windowed_left else (k, k, k, cd, cw)
    acc = np.zeros(shape, dtype=dense.dtype)
    for i, d0, dn in _blocks(n, d, h * w):
        flat = dense[i, d0:d0 + dn].reshape(-1, cd)
        for off in _taps(k):
            win = np.ascontiguousarray(_window(windowed, i, off, stride, d0, dn, (h, w))).reshape(-1, cw)
            if windowed_left:
                acc[off] += win.T @ flat
            else:
                acc[off] += flat.T @ win
    return acc


def _check_kernel(weight: Tensor) -> int:
    if weight.ndim != 5:
        raise ValueError(f"weight must be rank 5, got shape {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or weight.shape[4] != k:
        raise ValueError(f"kernel must be cubic, got {weight.shape[2:]}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    return k


def _check_rank5(x: Tensor, what: str = "input") -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} must be [N,C,D,H,W], got shape {x.shape}")


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_extent(n: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution (cross-correlation) with zero padding.

    ``weight`` is ``[Cout, Cin, k, k, k]``.
    """
    _check_rank5(x)
    k = _check_kernel(weight)
    cout, cin = weight.shape[:2]
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    spatial = x.shape[2:]
    if any(n + 2 * padding < k for n in spatial):
        raise ValueError(f"padded extent {spatial} (+2*{padding}) smaller than kernel {k}")
    extent = tuple(conv_output_extent(n, k, stride, padding) for n in spatial)

    xp = _pad_cl(_cl(x.data), padding)
    w = weight.data
    out = _gather(xp, np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)), stride, extent)
    if bias is not None:
        out += bias.data
    out = _cf(out)

    def backward_fn(g):
        g_cl = _cl(g)
        gx = gw = gb = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # unit stride: the input adjoint is a correlation with the flipped kernel
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1))
            gx = _cf(_gather(_pad_cl(g_cl, k - 1 - padding), flipped, 1, spatial))
        elif x.requires_grad:
            buf = _scatter(g_cl, np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)), stride, xp.shape[1:4])
            d, h, ww = spatial
            gx = _cf(buf[:, padding:padding + d, padding:padding + h, padding:padding + ww])
        if weight.requires_grad:
            taps = _tap_products(xp, g_cl, k, stride, windowed_left=True)
            gw = np.ascontiguousarray(taps.transpose(4, 3, 0, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, "conv3d", inputs, backward_fn)


def conv3d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 3D convolution; the input-adjoint of :func:`conv3d`.

    ``weight`` is ``[Cin, Cout, k, k, k]`` (same tensor layout a conv3d with
    ``Cout`` inputs and ``Cin`` outputs would use).
    """
    _check_rank5(x)
    k = _check_kernel(weight)
    cin, cout = weight.shape[:2]
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must be in [0, stride), got {output_padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    spatial = x.shape[2:]
    out_extent = tuple(conv_transpose_output_extent(n, k, stride, padding, output_padding) for n in spatial)
    if any(n <= 0 for n in out_extent):
        raise ValueError(f"transposed conv geometry gives non-positive extent {out_extent}")
    buf_extent = tuple(n + 2 * padding for n in out_extent)

    w = weight.data
    x_cl = _cl(x.data)
    buf = _scatter(x_cl, np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)), stride, buf_extent)
    d, h, ww = out_extent
    out = buf[:, padding:padding + d, padding:padding + h, padding:padding + ww]
    if bias is not None:
        out = out + bias.data
    out = _cf(out)

    def backward_fn(g):
        gpad = _pad_cl(_cl(g), padding)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _cf(_gather(gpad, np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)), stride, spatial))
        if weight.requires_grad:
            taps = _tap_products(gpad, x_cl, k, stride, windowed_left=False)
            gw = np.ascontiguousarray(taps.transpose(3, 4, 0, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, "conv3d_transpose", inputs, backward_fn)


# ----------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel running statistics."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    Training mode normalizes with the biased batch variance and folds the
    unbiased one into the running estimate.
    """
    _check_rank5(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    shape = (1, c, 1, 1, 1)
    axes = (0, 2, 3, 4)
    m = x.size // c if c else 0

    if training:
        if m < 2:
            raise ValueError(f"batch norm in train mode needs >= 2 values per channel, got {m}")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(shape)
        sdt = state.running_mean.dtype
        state.running_mean[...] = ((1 - momentum) * state.running_mean + momentum * mean).astype(sdt)
        state.running_var[...] = ((1 - momentum) * state.running_var + momentum * var * (m / (m - 1))).astype(sdt)
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
                gx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(shape)
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_output(out.astype(x.dtype, copy=False), "batch_norm3d", (x, gamma, beta), backward_fn)


# ----------------------------------------------------------------------------
# pointwise

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    # subgradient at 0 is the negative-side slope
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return make_output(out, "leaky_relu", (x,), lambda g: (np.where(pos, g, g * slope),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return make_output(out, "relu", (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype, copy=False),))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_output(x.data * c, "scale", (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_output(x.data + c, "shift", (x,), lambda g: (g,))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return make_output(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return make_output(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ----------------------------------------------------------------------------
# dense

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` with ``weight`` of shape [G, F]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects [N,F] input and [G,F] weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"feature mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(out, "linear", inputs, backward_fn)


# ----------------------------------------------------------------------------
# reductions and classification loss

REDUCTIONS = ("mean", "sum", "mean_abs", "mean_sq")


def reduce(kind: str, x: Tensor) -> Tensor:
    """Scalar reduction. ``mean_abs`` uses sign(0) = 0 as its subgradient."""
    if x.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    n = x.size
    d = x.data
    if kind == "sum":
        out, grad = d.sum(), lambda g: np.full(x.shape, g, dtype=x.dtype)
    elif kind == "mean":
        out, grad = d.mean(), lambda g: np.full(x.shape, g / n, dtype=x.dtype)
    elif kind == "mean_abs":
        out, grad = np.abs(d).mean(), lambda g: np.sign(d) * (g / n)
    elif kind == "mean_sq":
        out, grad = (d * d).mean(), lambda g: d * (2 * g / n)
    else:
        raise ValueError(f"unknown reduction {kind!r}; expected one of {REDUCTIONS}")
    out = np.asarray(out, dtype=x.dtype)
    return make_output(out, kind, (x,), lambda g: (grad(g).astype(x.dtype, copy=False),))


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return reduce("sum", x)


def mean_abs(x: Tensor) -> Tensor:
    return reduce("mean_abs", x)


def mean_sq(x: Tensor) -> Tensor:
    return reduce("mean_sq", x)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"{t.shape[0]} targets for {n} rows")
    if n == 0:
        raise ValueError("empty batch")
    if (t < 0).any() or (t >= k).any():
        raise ValueError(f"target class out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.asarray(-logp[rows, t].mean(), dtype=logits.dtype)

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        return (p * (g / n)).astype(logits.dtype, copy=False),

    return make_output(out, "softmax_cross_entropy", (logits,), backward_fn)
