"""Differentiable primitives over :class:`Tensor`.

Every function computes its forward result with numpy and records a closure
that maps the output gradient to input gradients. Images use NCHW layout.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return record("mul", ad * bd, (a, b), grad)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return record("div", out, (a, b), grad)


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``."""
    arg = x.data + eps
    with np.errstate(divide="ignore", invalid="ignore"):  # non-finite output is reported by anomaly mode
        out = np.log(arg)
    return record("log", out, (x,), lambda g: (g / arg,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def softplus(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return record("softplus", np.logaddexp(0.0, x.data), (x,), lambda g: (g * sig,))


# ----------------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.array(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.array(x.data.mean()), (x,),
                  lambda g: (np.full(shape, float(g) / n),))


def sum(x: Tensor, axis, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = axis if isinstance(axis, tuple) else (axis,)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (x,), grad)


def mean(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def index(x: Tensor, key) -> Tensor:
    """Basic/advanced numpy indexing; backward scatters into zeros."""
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return record("index", np.array(x.data[key]), (x,), grad)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape))
                                     if i != axis % len(ref)):
            raise ShapeError(f"concat: {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, grad)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy's batch broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = matmul(x, transpose(weight, (1, 0)))
    return add(out, bias) if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: axis {axis} of shape {x.shape} is empty")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), grad)


# ----------------------------------------------------------------------------
# convolution and pooling


def _check_image(kind: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected NCHW input, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (O, C, kh, kw) kernel."""
    _check_image("conv2d", x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (O, C, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    s, p = stride, padding
    ho, wo = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * p}x{w + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    need_x = x.requires_grad

    def grad(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if not need_x:
            return None, gw, gb
        gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, grad)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``weight`` is (O, C) or (O, C, 1, 1)."""
    _check_image("conv1x1", x)
    if weight.ndim == 4:
        if weight.shape[2:] != (1, 1):
            raise ShapeError(f"conv1x1: kernel must be 1x1, got {weight.shape}")
        weight = reshape(weight, weight.shape[:2])
    n, c, h, w = x.shape
    if weight.shape[1] != c:
        raise ShapeError(f"conv1x1: input has {c} channels, weight expects {weight.shape[1]}")
    flat = reshape(x, (n, c, h * w))
    out = matmul(weight, flat)
    out = reshape(out, (n, weight.shape[0], h, w))
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    _check_image("avg_pool2d", x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return record("avg_pool2d", out, (x,), grad)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    _check_image("global_avg_pool", x)
    hw = x.shape[2] * x.shape[3]
    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                  lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_image("upsample_nearest", x)
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"upsample_nearest: factor must be a positive integer, got {factor}")
    f = int(factor)
    if f == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    return record("upsample_nearest", out, (x,),
                  lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # output index i samples input coordinate i * n_in / n_out, clamped at the far edge
    src = np.minimum(np.arange(n_out) * (n_in / n_out), n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - t
    m[np.arange(n_out), hi] += t
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Separable linear interpolation to ``size``; output pixel i samples input i*H/Ho."""
    _check_image("upsample_bilinear", x)
    ho, wo = size
    h, w = x.shape[2:]
    if (ho, wo) == (h, w):
        return x
    uh, uw = _interp_matrix(h, ho), _interp_matrix(w, wo)
    out = uh @ (x.data @ uw.T)

    def grad(g):
        return ((uh.T @ g) @ uw,)

    return record("upsample_bilinear", out, (x,), grad)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except axis 1 (NC or NCHW input).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected NC or NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    gd = gamma.data.reshape(bshape)

    if training:
        m = x.size // c
        if m < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(c) * m / (m - 1)

        def grad(g):
            gxhat = g * gd
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv

        def grad(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return record("batch_norm", out, (x, gamma, beta), grad)
