"""Differentiable operators over :class:`Tensor`.

Spatial operators use channels-last layout.  A 3-D ``(H, W, C)`` input is a
single map; a 4-D ``(N, H, W, C)`` input is a batch.  Vector operators act on
the last axis and broadcast over any leading axes.
"""

from __future__ import annotations

import numpy as np

from .tape import Tensor, as_tensor, record

# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_batch(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{what} expects an HWC or NHWC tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c)
    return record("scale", (a,), out, lambda g: (g * c,))


def add_n(*xs) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    total = xs[0].data.copy()
    for x in xs[1:]:
        total = total + x.data
    out = Tensor(total)
    return record("add_n", xs, out, lambda g: [_unbroadcast(g, x.shape) for x in xs])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return np.split(g, bounds, axis=axis)

    return record("concat", xs, out, bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // out.data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return record("mean", (a,), out, bwd)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# layers


def dense(x, weight, bias=None) -> Tensor:
    """``out[..., j] = sum_i x[..., i] * w[i, j] + b[j]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    flat = x.data.reshape(-1, weight.shape[0])
    y = flat @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y.reshape(x.shape[:-1] + (weight.shape[1],)))

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, out, bwd)


def _same_padding(size: int, eff: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation, kernel layout ``(Kh, Kw, Cin, Cout)``.

    ``same`` zero-pads symmetrically, with the odd pixel on the high side.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    xb, single = _as_batch(x.data, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != xb.shape[3]:
        raise ValueError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    n, h, w, _ = xb.shape
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if padding == "same":
        ho, ph0, ph1 = _same_padding(h, eh, stride)
        wo, pw0, pw1 = _same_padding(w, ew, stride)
    elif padding == "valid":
        if h < eh or w < ew:
            raise ValueError(f"conv2d: input {x.shape} smaller than effective kernel {(eh, ew)}")
        ho, wo = (h - eh) // stride + 1, (w - ew) // stride + 1
        ph0 = ph1 = pw0 = pw1 = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(xb, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    k = kernel.data
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def window(i, j):
        r0, c0 = i * dilation, j * dilation
        return (slice(None), slice(r0, r0 + span_h, stride), slice(c0, c0 + span_w, stride))

    y = np.zeros((n, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            y += xp[window(i, j)] @ k[i, j]
    if bias is not None:
        y += bias.data
    out = Tensor(y[0] if single else y)

    def bwd(g):
        gb4 = g[None] if single else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        g2 = gb4.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                gk[i, j] = xp[win].reshape(-1, cin).T @ g2
                gxp[win] += gb4 @ k[i, j].T
        gx = gxp[:, ph0:ph0 + h, pw0:pw0 + w, :]
        gx = gx[0] if single else gx
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, bwd)


def global_pool(x, mode: str = "avg") -> Tensor:
    """Per-channel mean or max over all spatial positions: ``(..., H, W, C) -> (..., C)``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"global_pool expects HWC or NHWC, got {x.shape}")
    axes = (-3, -2)
    if mode == "avg":
        out = Tensor(x.data.mean(axis=axes))
        hw = x.shape[-3] * x.shape[-2]
        bwd = lambda g: (np.broadcast_to(g[..., None, None, :], x.shape) / hw,)
    elif mode == "max":
        out = Tensor(x.data.max(axis=axes))
        mask = _first_argmax_mask(x.data, axes)
        bwd = lambda g: (mask * g[..., None, None, :],)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return record(f"global_{mode}_pool", (x,), out, bwd)


def _first_argmax_mask(a: np.ndarray, axes: tuple[int, int]) -> np.ndarray:
    """One-hot mask of the first maximum over the two spatial axes."""
    moved = np.moveaxis(a, axes, (-2, -1))
    flat = moved.reshape(moved.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return np.moveaxis(mask.reshape(moved.shape), (-2, -1), axes)


def spatial_pool_over_channels(x, mode: str = "avg") -> Tensor:
    """Per-pixel mean or max across channels; channel extent becomes 1."""
    x = as_tensor(x)
    if mode == "avg":
        out = Tensor(x.data.mean(axis=-1, keepdims=True))
        c = x.shape[-1]
        bwd = lambda g: (np.broadcast_to(g, x.shape) / c,)
    elif mode == "max":
        out = Tensor(x.data.max(axis=-1, keepdims=True))
        idx = x.data.argmax(axis=-1)[..., None]
        mask = np.zeros_like(x.data)
        np.put_along_axis(mask, idx, 1.0, axis=-1)
        bwd = lambda g: (mask * g,)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return record(f"channel_{mode}_pool", (x,), out, bwd)


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` block average (HWC or NHWC)."""
    x = as_tensor(x)
    if factor == 1:
        return x
    xb, single = _as_batch(x.data, "avg_pool2d")
    n, h, w, c = xb.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    blocks = xb.reshape(n, h // factor, factor, w // factor, factor, c)
    y = blocks.mean(axis=(2, 4))
    out = Tensor(y[0] if single else y)

    def bwd(g):
        gb = g[None] if single else g
        up = np.repeat(np.repeat(gb, factor, axis=1), factor, axis=2) / (factor * factor)
        return (up[0] if single else up,)

    return record("avg_pool2d", (x,), out, bwd)


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        pos = x.data > 0
        out = Tensor(np.where(pos, x.data, 0.0))
        bwd = lambda g: (g * pos,)
    elif kind == "sigmoid":
        # split by sign so exp never overflows
        d = x.data
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = Tensor(s)
        bwd = lambda g: (g * s * (1.0 - s),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return record(kind, (x,), out, bwd)


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def softmax(x) -> Tensor:
    """Softmax over the last axis, shifted by the slice maximum."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), out, bwd)


def layer_norm(x, gamma, beta, epsilon: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), out, bwd)


def cross_entropy(probs, labels, floor: float = 1e-12) -> Tensor:
    """Mean of ``-ln(max(p[label], floor))`` over the leading axes."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    p2 = probs.data.reshape(-1, probs.shape[-1])
    lab = labels.reshape(-1)
    if lab.size != p2.shape[0]:
        raise ValueError(f"{lab.size} labels for {p2.shape[0]} probability rows")
    if lab.size and (lab.min() < 0 or lab.max() >= p2.shape[1]):
        raise ValueError("label out of range")
    rows = np.arange(lab.size)
    picked = p2[rows, lab]
    clipped = np.maximum(picked, floor)
    out = Tensor(-np.log(clipped).mean())

    def bwd(g):
        gp = np.zeros_like(p2)
        live = picked > floor
        gp[rows[live], lab[live]] = -g / (clipped[live] * lab.size)
        return (gp.reshape(probs.shape),)

    return record("cross_entropy", (probs,), out, bwd)

