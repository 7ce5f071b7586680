"""The closed set of differentiable operations used by the model.

Each op computes with plain numpy, wraps the result in a Tensor, and, when a
Tape is active and an input requires gradients, records a vector-Jacobian
closure.  There is no general graph compiler: anything the architecture needs
must appear here explicitly.
"""

from __future__ import annotations

import numpy as np

from . import scan_kernel
from .tensor import ShapeError, Tensor, active_tape, as_tensor


def _apply(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, vjp)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply(-a.data, (a,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return _apply(out_data, (x,), lambda g: (g * out_data,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _apply(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _apply(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out_data = x.data * s
    return _apply(out_data, (x,), lambda g: (g * (s + out_data * (1.0 - s)),))


def softplus(x) -> Tensor:
    """log(1 + e^x), computed without overflow; inverse of this is in vss init."""
    x = as_tensor(x)
    return _apply(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),))


# ---------------------------------------------------------------------------
# linear maps

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return _apply(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: (..., Din) -> (..., Dout)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear weight {w.shape} does not fit input {x.shape}")
    din, dout = w.shape
    out_data = x.data @ w.data
    if b is None:
        def vjp(g):
            return (
                g @ w.data.T,
                x.data.reshape(-1, din).T @ g.reshape(-1, dout),
            )
        return _apply(out_data, (x, w), vjp)

    b = as_tensor(b)
    if b.shape != (dout,):
        raise ShapeError(f"linear bias {b.shape} does not match output width {dout}")

    def vjp(g):
        return (
            g @ w.data.T,
            x.data.reshape(-1, din).T @ g.reshape(-1, dout),
            g.reshape(-1, dout).sum(axis=0),
        )

    return _apply(out_data + b.data, (x, w, b), vjp)


def grouped_linear(x, w, b=None) -> Tensor:
    """Per-group affine map: x (..., G, L, Din) with w (G, Din, Dout)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.ndim < 3 or x.shape[-3] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"grouped_linear weight {w.shape} does not fit input {x.shape}")
    out_data = np.einsum("...gli,gio->...glo", x.data, w.data)

    def grad_w(g):
        xf = x.data.reshape((-1,) + x.shape[-3:])
        gf = g.reshape((-1,) + g.shape[-3:])
        return np.einsum("bgli,bglo->gio", xf, gf)

    if b is None:
        def vjp(g):
            return np.einsum("...glo,gio->...gli", g, w.data), grad_w(g)
        return _apply(out_data, (x, w), vjp)

    b = as_tensor(b)
    if b.shape != (w.shape[0], w.shape[2]):
        raise ShapeError(f"grouped_linear bias {b.shape} does not match {w.shape}")

    def vjp(g):
        lead = tuple(range(g.ndim - 3)) + (g.ndim - 2,)
        return (
            np.einsum("...glo,gio->...gli", g, w.data),
            grad_w(g),
            g.sum(axis=lead),
        )

    return _apply(out_data + b.data[:, None, :], (x, w, b), vjp)


# ---------------------------------------------------------------------------
# normalization and class posteriors

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then apply the affine pair."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match channels {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv

    def vjp(g):
        dxn = g * gain.data
        dvar = (dxn * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = (-dxn * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0) * xc.mean(
            axis=-1, keepdims=True
        )
        dx = dxn * inv + dvar * (2.0 / c) * xc + dmu / c
        return (
            dx,
            (g * xn).reshape(-1, c).sum(axis=0),
            g.reshape(-1, c).sum(axis=0),
        )

    return _apply(xn * gain.data + bias.data, (x, gain, bias), vjp)


def softmax(x) -> Tensor:
    """Positive, sums to one along the last axis; max-shifted for stability."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _apply(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out_data = x.data - lse

    def vjp(g):
        return (g - np.exp(out_data) * g.sum(axis=-1, keepdims=True),)

    return _apply(out_data, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial ops

def depthwise_conv2d(x, kernels) -> Tensor:
    """Per-channel k x k convolution with zero 'same' padding.

    x: (..., H, W, C); kernels: (k, k, C).  Channels never mix, and the
    output shape equals the input shape.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"depthwise kernels must be (k, k, C), got {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-1] != kernels.shape[2]:
        raise ShapeError(f"input {x.shape} does not match kernels {kernels.shape}")
    h, w = x.shape[-3], x.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    out_data = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out_data += kernels.data[i, j] * xp[..., i : i + h, j : j + w, :]

    def vjp(g):
        gp = np.pad(g, pad)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx += kernels.data[k - 1 - i, k - 1 - j] * gp[..., i : i + h, j : j + w, :]
        gk = np.empty_like(kernels.data)
        for i in range(k):
            for j in range(k):
                prod = g * xp[..., i : i + h, j : j + w, :]
                gk[i, j] = prod.reshape(-1, prod.shape[-1]).sum(axis=0)
        return gx, gk

    return _apply(out_data, (x, kernels), vjp)


# ---------------------------------------------------------------------------
# reductions and rearrangement

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy precedent
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g_ = g
        if not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            for ax in sorted(a % len(shape) for a in axes):
                g_ = np.expand_dims(g_, ax)
        return (np.broadcast_to(g_, shape).copy(),)

    return _apply(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if np.isscalar(axis) else tuple(axis))]
    )
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _apply(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def take_channel(x, index: int) -> Tensor:
    """Select one channel along the last axis: (..., K) -> (...)."""
    x = as_tensor(x)
    if not 0 <= index < x.shape[-1]:
        raise ShapeError(f"channel {index} out of range for {x.shape}")

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., index] = g
        return (gx,)

    return _apply(x.data[..., index], (x,), vjp)


def select_class(x, labels: np.ndarray) -> Tensor:
    """Pick x[..., labels] pointwise; labels is an integer map shaped (...)."""
    x = as_tensor(x)
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise ShapeError(f"label map {labels.shape} does not match input {x.shape}")
    k = x.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    idx = labels[..., None]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _apply(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), vjp)


# ---------------------------------------------------------------------------
# permutation gathers for directional sequence layouts

def _expand_index(idx: np.ndarray, ndim: int) -> np.ndarray:
    # (G, L) -> (1, ..., 1, G, L, 1) for take_along_axis broadcasting.
    return idx.reshape((1,) * (ndim - 3) + idx.shape + (1,))


def take_positions(x, order: np.ndarray, inverse: np.ndarray) -> Tensor:
    """Read (..., L, C) into G ordered sequences (..., G, L, C).

    order[g, p] is the flat position read at sequence index p; inverse is the
    per-row inverse permutation (used for the adjoint scatter).
    """
    x = as_tensor(x)
    out_data = np.take(x.data, order, axis=-2)

    def vjp(g):
        idx = _expand_index(inverse, g.ndim)
        return (np.take_along_axis(g, idx, axis=-2).sum(axis=-3),)

    return _apply(out_data, (x,), vjp)


def gather_positions(x, perm: np.ndarray, inverse: np.ndarray) -> Tensor:
    """Apply a per-row permutation along the sequence axis of (..., G, L, C)."""
    x = as_tensor(x)
    out_data = np.take_along_axis(x.data, _expand_index(perm, x.ndim), axis=-2)

    def vjp(g):
        return (np.take_along_axis(g, _expand_index(inverse, g.ndim), axis=-2),)

    return _apply(out_data, (x,), vjp)


# ---------------------------------------------------------------------------
# the recurrence primitive

def ssm_scan(a, bx, c, block: int = scan_kernel.DEFAULT_BLOCK, threads: int = 1) -> Tensor:
    """State-space recurrence with per-step read-out.

    h[l] = a[l] * h[l-1] + bx[l] elementwise with h[-1] = 0, followed by
    y[l] = sum_n c[l, n] * h[l, :, n].  Shapes: a, bx (..., L, E, N);
    c (..., L, N); result (..., L, E).  The adjoint runs the same recurrence
    backwards in time, so both directions use the blocked kernel.
    """
    a, bx, c = as_tensor(a), as_tensor(bx), as_tensor(c)
    if a.shape != bx.shape or a.ndim < 3:
        raise ShapeError(f"scan coefficients disagree: {a.shape} vs {bx.shape}")
    if c.shape != a.shape[:-2] + (a.shape[-1],):
        raise ShapeError(f"read-out shape {c.shape} does not match {a.shape}")

    al = np.moveaxis(a.data, -3, 0)
    bl = np.moveaxis(bx.data, -3, 0)
    cl = np.moveaxis(c.data, -2, 0)
    tape = active_tape()
    recording = tape is not None and (a.requires_grad or bx.requires_grad or c.requires_grad)
    if not recording:
        y = scan_kernel.ssm_apply(al, bl, cl, block=block, threads=threads)
        return Tensor(np.moveaxis(y, 0, -2))

    y, h = scan_kernel.ssm_apply(al, bl, cl, block=block, threads=threads, keep_hidden=True)

    def vjp(g):
        gy = np.moveaxis(g, -2, 0)
        gc = (gy[..., None] * h).sum(axis=-2)
        gh = gy[..., None] * cl[..., None, :]
        a_rev = al[::-1]
        a_shift = np.concatenate([np.ones_like(a_rev[:1]), a_rev[:-1]], axis=0)
        lam = scan_kernel.scan_blocked(a_shift, gh[::-1], block=block, threads=threads)[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        return (
            np.moveaxis(lam * h_prev, 0, -3),
            np.moveaxis(lam, 0, -3),
            np.moveaxis(gc, 0, -2),
        )

    out = Tensor(np.moveaxis(y, 0, -2), requires_grad=True)
    tape.record(out, (a, bx, c), vjp)
    return out


# ---------------------------------------------------------------------------
# operator plumbing on Tensor

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.sum = sum
Tensor.mean = mean
Tensor.reshape = reshape
Tensor.transpose = transpose
