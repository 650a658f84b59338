"""Differentiable operations on :class:`~oshx.tensor.Tensor`.

Arrays are batch-first (N, C, H, W) for images and (..., T, D) for token
sequences.  Convolution goes through im2col + one matrix multiply.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Context, DimensionError, Function, Tensor, UsageError, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce two operands to tensors of a common dtype (constants follow tensors)."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a_shape=a.shape, b_shape=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.a_shape), _unbroadcast(g, ctx.b_shape)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a_shape=a.shape, b_shape=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.a_shape), _unbroadcast(-g, ctx.b_shape)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _pair(a, b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Mul.apply(a, b)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# reductions and shape glue
# ---------------------------------------------------------------------------

class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.save(shape=x.shape, axis=axis, keepdims=keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.save(shape=x.shape)
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse every axis from ``start_axis`` on into one."""
    x = as_tensor(x)
    return reshape(x, x.shape[:start_axis] + (-1,))


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else axes
        ctx.save(inverse=tuple(np.argsort(axes)))
        return np.ascontiguousarray(x.transpose(axes))

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(ctx.inverse),)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


class GetItem(Function):
    @staticmethod
    def forward(ctx, x, index=None):
        ctx.save(shape=x.shape, dtype=x.dtype, index=index)
        return np.ascontiguousarray(x[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=ctx.dtype)
        if _is_basic_index(ctx.index):
            out[ctx.index] += g
        else:
            np.add.at(out, ctx.index, g)
        return (out,)


def getitem(x: Tensor, index) -> Tensor:
    return GetItem.apply(x, index=index)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.save(shape=x.shape)
        return np.ascontiguousarray(np.broadcast_to(x, shape))

    @staticmethod
    def backward(ctx, g):
        return (_unbroadcast(g, ctx.shape),)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs, axis=0):
        first = xs[0]
        ax = axis % first.ndim
        for x in xs[1:]:
            if x.ndim != first.ndim or any(
                x.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax
            ):
                raise DimensionError(
                    f"concat along axis {axis}: shapes {[y.shape for y in xs]} disagree off-axis"
                )
        ctx.save(axis=ax, sizes=[x.shape[ax] for x in xs])
        return np.concatenate(xs, axis=ax)

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, bounds, axis=ctx.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask=mask)
        return np.where(mask, x, 0).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class LeakyReLU(Function):
    @staticmethod
    def forward(ctx, x, alpha=0.01):
        mask = x > 0
        ctx.save(mask=mask, alpha=alpha)
        return np.where(mask, x, x * x.dtype.type(alpha))

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx.mask, g, g * g.dtype.type(ctx.alpha)),)


class GELU(Function):
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""

    @staticmethod
    def forward(ctx, x):
        ctx.save(x=x)
        return (x * _normal_cdf(x)).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        x = ctx.x
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return ((g * (_normal_cdf(x) + x * pdf)).astype(x.dtype),)


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: Tensor, alpha: float = 0.25) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
    return LeakyReLU.apply(x, alpha=alpha)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class Dropout(Function):
    @staticmethod
    def forward(ctx, x, mask=None):
        ctx.save(mask=mask)
        return x * mask

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return Dropout.apply(x, mask=mask)


# ---------------------------------------------------------------------------
# dense layers and normalization
# ---------------------------------------------------------------------------

class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        if x.shape[-1] != w.shape[1]:
            raise DimensionError(
                f"linear: input trailing dim {x.shape[-1]} (shape {x.shape}) "
                f"!= weight in-features {w.shape[1]} (shape {w.shape})"
            )
        ctx.save(x=x, w=w, has_bias=b is not None)
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.x, ctx.w
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if ctx.has_bias else None
        return gx, gw, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the trailing axis."""
    return Linear.apply(x, weight, bias)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-6):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat=xhat, inv=inv, gamma=gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma = ctx.xhat, ctx.inv, ctx.gamma
        d = xhat.shape[-1]
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class BatchNorm(Function):
    """Per-channel normalization of an (N, C, H, W) array.

    Without ``mean``/``var`` the statistics come from the batch itself over
    (N, H, W) and the backward pass differentiates through them.
    """

    @staticmethod
    def forward(ctx, x, gamma, beta, mean=None, var=None, eps=1e-5):
        batch_stats = mean is None
        if batch_stats:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        shape = (1, -1, 1, 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        ctx.save(xhat=xhat, inv=inv, gamma=gamma, batch_stats=batch_stats)
        return xhat * gamma.reshape(shape) + beta.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma = ctx.xhat, ctx.inv, ctx.gamma
        axes = (0, 2, 3)
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx_hat = g * gamma.reshape(1, -1, 1, 1)
        scale = inv.reshape(1, -1, 1, 1)
        if ctx.batch_stats:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            gx = scale / m * (
                m * gx_hat
                - gx_hat.sum(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gx_hat * scale
        return gx, ggamma, gbeta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization; in training mode also updates the running statistics in place."""
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    if not training:
        return BatchNorm.apply(x, gamma, beta, mean=running_mean.astype(x.dtype),
                               var=running_var.astype(x.dtype), eps=eps)
    out = BatchNorm.apply(x, gamma, beta, eps=eps)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3)) * (n / max(n - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * batch_mean
    running_var *= 1.0 - momentum
    running_var += momentum * batch_var
    return out


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Rearrange (N, C, H, W) windows into rows of a (N*OH*OW, C*kh*kw) matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def col2im(
    cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, stride: int, padding: int, oh: int, ow: int
) -> np.ndarray:
    """Scatter-add im2col rows back onto an (N, C, H, W) array."""
    n, c, h, w = x_shape
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


# upper bound on one im2col buffer; larger batches are processed in chunks
COL_BUDGET_BYTES = 64 * 2**20


def _conv_chunk(x: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> int:
    per_sample = oh * ow * x.shape[1] * kh * kw * x.itemsize
    return max(1, COL_BUDGET_BYTES // max(per_sample, 1))


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, b, stride=1, padding=0):
        c_out, c_in, kh, kw = w.shape
        n = x.shape[0]
        oh = conv_output_size(x.shape[2], kh, stride, padding)
        ow = conv_output_size(x.shape[3], kw, stride, padding)
        wmat_t = w.reshape(c_out, -1).T
        out = np.empty((n, c_out, oh, ow), dtype=x.dtype)
        step = _conv_chunk(x, kh, kw, oh, ow)
        for s in range(0, n, step):
            cols, _, _ = im2col(x[s:s + step], kh, kw, stride, padding)
            o = cols @ wmat_t
            if b is not None:
                o += b
            out[s:s + step] = o.reshape(-1, oh, ow, c_out).transpose(0, 3, 1, 2)
        # cols are recomputed in backward to keep peak memory at one chunk's worth
        ctx.save(x=x, w=w, stride=stride, padding=padding, oh=oh, ow=ow, has_bias=b is not None)
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.x, ctx.w
        c_out, c_in, kh, kw = w.shape
        wmat = w.reshape(c_out, -1)
        gw = np.zeros_like(wmat)
        gx = np.empty_like(x)
        step = _conv_chunk(x, kh, kw, ctx.oh, ctx.ow)
        for s in range(0, x.shape[0], step):
            xs = x[s:s + step]
            g2 = g[s:s + step].transpose(0, 2, 3, 1).reshape(-1, c_out)
            cols, _, _ = im2col(xs, kh, kw, ctx.stride, ctx.padding)
            gw += g2.T @ cols
            gx[s:s + step] = col2im(g2 @ wmat, xs.shape, kh, kw, ctx.stride, ctx.padding, ctx.oh, ctx.ow)
        gb = g.sum(axis=(0, 2, 3)) if ctx.has_bias else None
        return gx, gw.reshape(w.shape), gb


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (C,H,W) or (N,C,H,W) input with (C_out,C_in,kH,kW) filters."""
    x = as_tensor(x)
    xb, squeeze = _as_batch(x)
    if weight.ndim != 4 or xb.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input shape {x.shape} has {xb.shape[1]} channels but weight shape "
            f"{weight.shape} expects {weight.shape[1] if weight.ndim == 4 else '?'}"
        )
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    kh, kw = weight.shape[2:]
    if xb.shape[2] + 2 * padding < kh or xb.shape[3] + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xb.shape[2:]} (+{padding})")
    out = Conv2d.apply(xb, weight, bias, stride=stride, padding=padding)
    return reshape(out, out.shape[1:]) if squeeze else out


class MaxPool2d(Function):
    @staticmethod
    def forward(ctx, x, window=2, stride=2, padding=0):
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        n, c, oh, ow = win.shape[:4]
        flat = win.reshape(n, c, oh, ow, window * window)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        ctx.save(arg=arg, padded_shape=x.shape, window=window, stride=stride, padding=padding)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        k, s, p = ctx.window, ctx.stride, ctx.padding
        n, c, oh, ow = g.shape
        out = np.zeros(ctx.padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = ctx.arg == i * k + j
                out[:, :, i:i + s * oh:s, j:j + s * ow:s] += g * hit
        if p:
            out = out[:, :, p:-p, p:-p]
        return (out,)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max over ``window`` x ``window`` patches; padded cells never win."""
    x = as_tensor(x)
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d window and stride must be >= 1")
    xb, squeeze = _as_batch(x)
    if xb.shape[2] + 2 * padding < window or xb.shape[3] + 2 * padding < window:
        raise DimensionError(f"maxpool2d: window {window} larger than padded input {xb.shape[2:]} (+{padding})")
    out = MaxPool2d.apply(xb, window=window, stride=stride, padding=padding)
    return reshape(out, out.shape[1:]) if squeeze else out


def global_avg_pool(x: Tensor) -> Tensor:
    """Average each channel map: (..., C, H, W) -> (..., C)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class Attention(Function):
    """softmax(q k^T / sqrt(dh)) v per head, on a packed (B, T, 3, H, dh) qkv array.

    Returns (B, T, H, dh).  Only qkv and the attention weights are kept for
    backward.
    """

    @staticmethod
    def forward(ctx, qkv):
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        scale = qkv.dtype.type(1.0 / math.sqrt(qkv.shape[-1]))
        scores = (q * scale) @ k.transpose(0, 1, 3, 2)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        ctx.save(qkv=qkv, attn=scores, scale=scale)
        return np.ascontiguousarray((scores @ v).transpose(0, 2, 1, 3))

    @staticmethod
    def backward(ctx, g):
        qkv, attn, scale = ctx.qkv, ctx.attn, ctx.scale
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        gctx = g.transpose(0, 2, 1, 3)
        gv = attn.transpose(0, 1, 3, 2) @ gctx
        ga = gctx @ v.transpose(0, 1, 3, 2)
        ga -= (ga * attn).sum(axis=-1, keepdims=True)
        ga *= attn
        gq = (ga @ k) * scale
        gk = (ga.transpose(0, 1, 3, 2) @ q) * scale
        out = np.empty_like(qkv)
        for i, gi in enumerate((gq, gk, gv)):
            out[:, :, i] = gi.transpose(0, 2, 1, 3)
        return (out,)


def multi_head_attention(
    tokens: Tensor,
    heads: int,
    qkv_weight: Tensor,
    qkv_bias: Tensor | None,
    proj_weight: Tensor,
    proj_bias: Tensor | None,
    trace: list | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over (..., T, D) tokens.

    ``qkv_weight`` maps D -> 3D laid out as [q | k | v], each split into
    ``heads`` contiguous chunks of D/heads.
    """
    tokens = as_tensor(tokens)
    d = tokens.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"embedding width {d} is not divisible by {heads} heads")
    if qkv_weight.shape != (3 * d, d):
        raise DimensionError(f"qkv weight {qkv_weight.shape} does not map {d} -> {3 * d}")
    head_dim = d // heads
    lead = tokens.shape[:-2]
    t = tokens.shape[-2]
    x = reshape(tokens, (-1, t, d))
    b = x.shape[0]
    qkv = linear(x, qkv_weight, qkv_bias)
    if trace is not None:
        trace.append(("qkv", tuple(x.shape[1:]), tuple(qkv.shape[1:])))
    heads_out = Attention.apply(reshape(qkv, (b, t, 3, heads, head_dim)))
    if trace is not None:
        trace.append(("heads", (t, d), (heads, t, head_dim)))
    merged = reshape(heads_out, (b, t, d))
    out = linear(merged, proj_weight, proj_bias)
    if trace is not None:
        trace.append(("proj", tuple(merged.shape[1:]), tuple(out.shape[1:])))
    return reshape(out, lead + (t, d))


# ---------------------------------------------------------------------------
# non-differentiable helpers
# ---------------------------------------------------------------------------

def resize_bilinear(x: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) to (..., side, side), half-pixel centers."""
    h, w = x.shape[-2:]
    if (h, w) == (side, side):
        return x

    def coords(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(side) + 0.5) * (n_in / side) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(x.dtype)

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = x[..., y0, :] * (1 - fy)[:, None] + x[..., y1, :] * fy[:, None]
    return (top[..., x0] * (1 - fx) + top[..., x1] * fx).astype(x.dtype)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


__all__ = [
    "Context", "add", "sub", "mul", "matmul", "sum", "mean", "reshape", "flatten", "transpose",
    "getitem", "broadcast_to", "concat", "relu", "leaky_relu", "gelu", "softmax", "dropout",
    "linear", "layer_norm", "batch_norm", "conv2d", "maxpool2d", "global_avg_pool",
    "multi_head_attention", "im2col", "col2im", "conv_output_size", "resize_bilinear",
]
