"""Differentiable primitives.

Every primitive takes and returns :class:`Tensor` values and, when a tape is
active, registers a vector-Jacobian product with it. Image tensors are laid out
as ``(C, H, W)`` or ``(N, C, H, W)``; the channel axis is always ``-3``.
There is no implicit broadcasting: binary operands must have equal shapes, and
the only mixed-shape primitives are the explicit bias/channel adds.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_node(x.data * s, (x,), lambda g: (g * s,), "scale")


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """``a * x + b`` with scalar ``a`` and ``b``."""
    a, b = float(a), float(b)
    return make_node(x.data * a + b, (x,), lambda g: (g * a,), "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    k = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * k, (x,), lambda g: (g * k,), "leaky_relu")


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # logistic without overflow
    y = x.data * sig
    return make_node(y, (x,), lambda g: (g * (sig + y * (1.0 - sig)),), "silu")


def quantize(x: Tensor, step: float) -> Tensor:
    """Deadzone uniform quantizer; reconstruction at bin centres.

    The backward rule is the straight-through identity, since the true
    derivative is zero almost everywhere.
    """
    if step <= 0:
        return make_node(x.data.copy(), (x,), lambda g: (g,), "quantize")
    q = np.floor(np.abs(x.data) / step)
    y = np.where(q > 0, np.sign(x.data) * (q + 0.5) * step, 0.0).astype(x.dtype)
    return make_node(y, (x,), lambda g: (g,), "quantize")


# ----------------------------------------------------------------- reductions

def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "reduce_sum")


def sq_l2(x: Tensor) -> Tensor:
    """Squared Euclidean norm, summed over every element."""
    d = x.data
    return make_node(np.asarray(np.vdot(d, d), dtype=x.dtype), (x,), lambda g: (2.0 * g * d,), "sq_l2")


def mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.size)


# --------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return make_node(y, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -3) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: extents {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([t.data for t in xs], axis=ax), tuple(xs),
                     lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -3) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]} of {x.shape}")
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        out.append(make_node(x.data[sl], (x,), vjp, "split"))
        start += n
    return out


def polyphase_split(x: Tensor, k: int = 2) -> Tensor:
    """Space-to-depth by sample phase.

    ``(.., C, H, W) -> (.., k*k*C, H/k, W/k)`` with phase-major channel order:
    output channel ``(r*k + s)*C + c`` holds ``x[c, r::k, s::k]``.
    """
    *lead, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"polyphase_split: extents {(h, w)} not divisible by {k}; pad H and W to a multiple of {k}")
    n = len(lead)
    y = x.data.reshape(*lead, c, h // k, k, w // k, k)
    # (.., c, i, r, j, s) -> (.., r, s, c, i, j)
    perm = tuple(range(n)) + (n + 2, n + 4, n, n + 1, n + 3)
    y = y.transpose(perm).reshape(*lead, k * k * c, h // k, w // k)
    inv = np.argsort(perm)

    def vjp(g):
        g = g.reshape(*lead, k, k, c, h // k, w // k).transpose(inv)
        return (g.reshape(x.shape),)

    return make_node(y, (x,), vjp, "polyphase_split")


def polyphase_merge(x: Tensor, k: int = 2) -> Tensor:
    """Exact inverse of :func:`polyphase_split`."""
    *lead, kc, h, w = x.shape
    if kc % (k * k):
        raise ShapeError(f"polyphase_merge: channel extent {kc} not divisible by {k * k}")
    c = kc // (k * k)
    n = len(lead)
    perm = tuple(range(n)) + (n + 2, n + 3, n, n + 4, n + 1)
    y = x.data.reshape(*lead, k, k, c, h, w).transpose(perm).reshape(*lead, c, h * k, w * k)
    inv = np.argsort(perm)

    def vjp(g):
        g = g.reshape(*lead, c, h, k, w, k).transpose(inv)
        return (g.reshape(x.shape),)

    return make_node(y, (x,), vjp, "polyphase_merge")


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    y = x.data.repeat(k, axis=-2).repeat(k, axis=-1)
    *lead, h, w = x.shape

    def vjp(g):
        return (g.reshape(*lead, h, k, w, k).sum(axis=(-3, -1)),)

    return make_node(y, (x,), vjp, "upsample_nearest")


def avg_pool(x: Tensor, k: int) -> Tensor:
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool: extents {(h, w)} not divisible by {k}")
    y = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def vjp(g):
        return ((g / (k * k)).repeat(k, axis=-2).repeat(k, axis=-1),)

    return make_node(y.astype(x.dtype), (x,), vjp, "avg_pool")


# ------------------------------------------------------------ bias & linear

def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` of shape ``(C,)``.

    The channel axis is ``-1`` for 2-D inputs and ``-3`` otherwise.
    """
    ax = -1 if x.ndim == 2 else -3
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match channel extent of {x.shape}")
    shape = [1] * x.ndim
    shape[ax] = b.shape[0]
    bd = b.data.reshape(shape)
    axes = tuple(i for i in range(x.ndim) if i != x.ndim + ax)
    return make_node(x.data + bd, (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def channel_add(x: Tensor, e: Tensor) -> Tensor:
    """Add a per-sample, per-channel vector ``e (N, C)`` to ``x (N, C, H, W)``."""
    if x.ndim != 4 or e.shape != x.shape[:2]:
        raise ShapeError(f"channel_add: vector {e.shape} does not match leading extents of {x.shape}")
    return make_node(x.data + e.data[:, :, None, None], (x, e),
                     lambda g: (g, g.sum(axis=(2, 3))), "channel_add")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: extents {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# --------------------------------------------------------------- convolution

def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W) input, got {x.shape}")


def _out_extent(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xd: np.ndarray, kh: int, kw: int, s: int, p: int) -> tuple[np.ndarray, int, int]:
    # rows are output pixels, columns ordered (kh, kw, C) so each copy moves
    # contiguous channel runs
    n, c, h, w = xd.shape
    ho, wo = _out_extent(h, kh, p, s), _out_extent(w, kw, p, s)
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=xd.dtype)
    xp[:, p : p + h, p : p + w, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], s: int, p: int) -> np.ndarray:
    # transposed convolution: dilate g by the stride, then correlate with the
    # flipped, channel-swapped kernel
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    rh = (h + 2 * p - kh) % s
    rw = (wd + 2 * p - kw) % s
    if s > 1 or rh or rw:
        gd = np.zeros((n, o, (ho - 1) * s + 1 + rh, (wo - 1) * s + 1 + rw), dtype=g.dtype)
        gd[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s] = g
    else:
        gd = g
    wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    q = kh - 1 - p
    if q < 0:
        gd = gd[:, :, -q : gd.shape[2] + q, -q : gd.shape[3] + q]
        q = 0
    cols, _, _ = _im2col(gd, kh, kw, 1, q)
    dx = cols @ _kernel_matrix(wt).T
    return dx.reshape(n, h, wd, c).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense 2-D cross-correlation with zero padding.

    ``w`` has shape ``(C_out, C_in, kh, kw)``. The default padding is
    ``kh // 2`` which keeps the spatial size for odd kernels at stride 1.
    """
    xd, squeeze = _batched(x, "conv2d")
    n, c, h, wd = xd.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} (input {x.shape}) != kernel channels {ci} (kernel {w.shape})")
    if x.dtype != w.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    p = kh // 2 if padding is None else padding
    s = stride
    if _out_extent(h, kh, p, s) < 1 or _out_extent(wd, kw, p, s) < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, wd)}")
    cols, ho, wo = _im2col(xd, kh, kw, s, p)
    wmat = _kernel_matrix(w.data)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        dx = _conv_input_grad(g4, w.data, (h, wd), s, p)
        if squeeze:
            dx = dx[0]
        db = None if b is None else g4.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, vjp, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int | None = None) -> Tensor:
    """Per-channel 2-D cross-correlation, ``w`` of shape ``(C, 1, kh, kw)``."""
    xd, squeeze = _batched(x, "depthwise_conv2d")
    n, c, h, wd = xd.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} does not match input channels of {x.shape}")
    if x.dtype != w.dtype:
        raise TypeError(f"depthwise_conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    _, _, kh, kw = w.shape
    p = kh // 2 if padding is None else padding
    s = stride
    ho, wo = _out_extent(h, kh, p, s), _out_extent(wd, kw, p, s)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    wk = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] * wk[None, :, i, j, None, None]
    if b is not None:
        if b.shape != (c,):
            raise ShapeError(f"depthwise_conv2d: bias {b.shape} does not match {c} channels")
        out += b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                dxp[sl] += g4 * wk[None, :, i, j, None, None]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g4, xp[sl])
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        if squeeze:
            dx = dx[0]
        db = None if b is None else g4.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, vjp, "depthwise_conv2d")


def separable_conv2d(x: Tensor, dw: Tensor, pw: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise ``k x k`` followed by pointwise ``1 x 1`` convolution."""
    return conv2d(depthwise_conv2d(x, dw), pw, b, padding=0)


def constant(x, dtype=None) -> Tensor:
    """Wrap a value as a tensor that never receives gradients."""
    return as_tensor(x, dtype)
