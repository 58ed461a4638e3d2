"""Differentiable primitives.

Each op computes its forward value with numpy and returns a Tensor carrying a
closure for the vector-Jacobian product. Shapes follow the NCHW convention.
"""

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgument
from .tensor import DTYPE, Tensor

# sigmoid/tanh outputs are clamped into the open interval so the range
# contract survives float saturation
_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(kind, *args):
    shape = args[0].shape
    for a in args[1:]:
        if a.shape != shape:
            raise InvalidArgument(f"{kind}: shape mismatch {shape} vs {a.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# pointwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), bw, "sub")


def hadamard(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), bw, "hadamard")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def one_minus(a):
    a = _as_tensor(a)
    return Tensor.from_op(1.0 - a.data, (a,), lambda g: (-g,), "one_minus")


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, _TINY, _ONE_BELOW, out=y)

    def bw(g):
        return (g * y * (1.0 - y),)

    return Tensor.from_op(y, (a,), bw, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    y = np.clip(np.tanh(a.data), -_ONE_BELOW, _ONE_BELOW)

    def bw(g):
        return (g * (1.0 - y * y),)

    return Tensor.from_op(y, (a,), bw, "tanh")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of mapping it to zero
    return Tensor.from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def pointwise(kind, *args):
    """Dispatch for the elementwise family: sigmoid, tanh, add, hadamard, scale.

    ``scale`` takes ``(tensor, factor)``; the binary kinds require equal shapes.
    """
    if kind == "sigmoid":
        return sigmoid(args[0])
    if kind == "tanh":
        return tanh(args[0])
    if kind == "scale":
        return scale(args[0], args[1])
    if kind in ("add", "hadamard"):
        a, b = _as_tensor(args[0]), _as_tensor(args[1])
        _same_shape(kind, a, b)
        return add(a, b) if kind == "add" else hadamard(a, b)
    raise InvalidArgument(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor.from_op(out, (a,), bw, "mean")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def index(a, idx):
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)  # repeated fancy indices must accumulate
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tuple(tensors), bw, "stack")


def split(a, sizes, axis=0):
    """Split along ``axis`` into chunks of the given sizes."""
    a = _as_tensor(a)
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(index(a, tuple(sl)))
        start += n
    return out


# ---------------------------------------------------------------------------
# dense layers


def fully_connected(x, weight, bias):
    """``x @ weight.T + bias`` for x [N,D], weight [M,D], bias [M]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise InvalidArgument("fully_connected expects x [N,D], weight [M,D], bias [M]")
    if x.shape[1] != weight.shape[1] or bias.shape[0] != weight.shape[0]:
        raise InvalidArgument(
            f"fully_connected: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor.from_op(out, (x, weight, bias), bw, "fully_connected")


def _out_extent(n, k, stride, pad, what):
    span = n + 2 * pad - k
    if span < 0:
        raise InvalidArgument(f"{what}: kernel {k} larger than padded extent {n + 2 * pad}")
    if span % stride:
        raise InvalidArgument(f"{what}: ({n}+2*{pad}-{k})/{stride} is not integral")
    return span // stride + 1


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation style 2-D convolution (no kernel flip) plus bias."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidArgument(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, c2, kh, kw = kernel.shape
    if c != c2:
        raise InvalidArgument(f"conv2d: input has {c} channels, kernel expects {c2}")
    if stride < 1 or pad < 0:
        raise InvalidArgument("conv2d: stride must be positive and pad nonnegative")
    ho = _out_extent(h, kh, stride, pad, "conv2d")
    wo = _out_extent(w, kw, stride, pad, "conv2d")
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise InvalidArgument(f"conv2d: bias shape {bias.shape} != ({o},)")
        parents.append(bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    kd = kernel.data
    need_x = x.requires_grad

    def bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if need_x:
            cols = np.tensordot(g, kd, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, tuple(parents), bw, "conv2d")


def max_pool2d(x, k, stride=None):
    """Windowed max; the gradient goes to the first row-major maximum."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4 or k < 1 or stride < 1:
        raise InvalidArgument("max_pool2d expects [N,C,H,W] with positive k and stride")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise InvalidArgument(f"max_pool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for a in range(k * k):
            di, dj = divmod(a, k)
            sel = np.where(arg == a, g, 0.0)
            gx[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += sel
        return (gx,)

    return Tensor.from_op(out, (x,), bw, "max_pool2d")


def cross_correlate(window, template):
    """Dense inner products of per-sample templates against search windows.

    window [N,D,Hf,Wf], template [N,D,hf,wf] -> [N,Hf-hf+1,Wf-wf+1]. Only
    fully overlapping placements are produced.
    """
    window, template = _as_tensor(window), _as_tensor(template)
    if window.ndim != 4 or template.ndim != 4:
        raise InvalidArgument("cross_correlate expects [N,D,H,W] window and template")
    n, d, hf, wf = window.shape
    n2, d2, ht, wt = template.shape
    if n != n2 or d != d2:
        raise InvalidArgument(f"cross_correlate: window {window.shape} vs template {template.shape}")
    if ht > hf or wt > wf:
        raise InvalidArgument(f"cross_correlate: template {ht}x{wt} larger than window {hf}x{wf}")
    hc, wc = hf - ht + 1, wf - wt + 1
    fd, td = window.data, template.data
    win = sliding_window_view(fd, (ht, wt), axis=(2, 3))  # N,D,Hc,Wc,ht,wt
    out = np.einsum("ndhwij,ndij->nhw", win, td)

    def bw(g):
        gt = np.einsum("nhw,ndhwij->ndij", g, win)
        gf = np.zeros(fd.shape, dtype=DTYPE)
        for i in range(ht):
            for j in range(wt):
                gf[:, :, i:i + hc, j:j + wc] += g[:, None, :, :] * td[:, :, i, j][:, :, None, None]
        return gf, gt

    return Tensor.from_op(out, (window, template), bw, "cross_correlate")


def sigmoid_cross_entropy(logits, labels):
    """Mean binary cross-entropy on raw logits, in the log-sum-exp stable form."""
    logits = _as_tensor(logits)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise InvalidArgument(f"labels shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidArgument("sigmoid_cross_entropy labels must be 0 or 1")
    z = logits.data
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.array(per.sum() / n)

    def bw(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * (sig - y) / n,)

    return Tensor.from_op(out, (logits,), bw, "sigmoid_cross_entropy")
