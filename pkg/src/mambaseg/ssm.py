"""Continuous state-space models and the scans that evaluate them.

A model is the linear ODE h'(t) = A h(t) + B x(t), y(t) = C h(t) + D x(t)
with diagonal A, applied independently per channel.  This module provides
the continuous form (with an RK4 reference integrator), its zero-order-hold
discretization, and three sequence evaluators: a plain sequential recurrence
(the ground-truth oracle), a blocked parallel scan with identical output,
and a differentiable selective scan whose per-step timescale and
input/read-out weights are produced from the input by learned projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nd import Tensor, ops, scan_kernel
from .nd.tensor import ShapeError

DEFAULT_STATE_SIZE = 16

# Softplus of the initial timescale bias lands in this range (log-uniform).
DELTA_INIT_RANGE = (0.01, 0.1)


def _as_float_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ContinuousSSM:
    """Diagonal linear ODE parameters, one row of each array per channel.

    ``a`` holds the diagonal of the evolution matrix (all entries strictly
    negative for stability), ``b`` the input projection, ``c_proj`` the
    read-out projection, and ``d`` the per-channel skip coefficient.
    """

    a: np.ndarray
    b: np.ndarray
    c_proj: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a = _as_float_array(self.a, "a")
        b = _as_float_array(self.b, "b")
        c_proj = _as_float_array(self.c_proj, "c_proj")
        d = _as_float_array(self.d, "d")
        if a.ndim != 2 or a.shape[1] < 1:
            raise ShapeError(f"a must be (channels, state) with state >= 1, got {a.shape}")
        if b.shape != a.shape or c_proj.shape != a.shape:
            raise ShapeError(
                f"b {b.shape} and c_proj {c_proj.shape} must match a {a.shape}"
            )
        if d.shape != (a.shape[0],):
            raise ShapeError(f"d must be (channels,), got {d.shape}")
        if np.any(a >= 0.0):
            raise ValueError("evolution diagonal must be strictly negative")
        for field, arr in (("a", a), ("b", b), ("c_proj", c_proj), ("d", d)):
            object.__setattr__(self, field, arr)

    @property
    def channels(self) -> int:
        return self.a.shape[0]

    @property
    def state_size(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class DiscretizedSSM:
    """Zero-order-hold step weights for a fixed timescale per channel.

    ``a_bar`` lies in [0, 1) for a stable continuous system (exactly 0 only
    when e^{delta * a} underflows); ``c_bar`` equals the continuous read-out
    and ``d`` carries the skip coefficient through unchanged.
    """

    a_bar: np.ndarray
    b_bar: np.ndarray
    c_bar: np.ndarray
    d: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        a_bar = _as_float_array(self.a_bar, "a_bar")
        b_bar = _as_float_array(self.b_bar, "b_bar")
        c_bar = _as_float_array(self.c_bar, "c_bar")
        d = _as_float_array(self.d, "d")
        delta = _as_float_array(self.delta, "delta")
        if a_bar.ndim != 2:
            raise ShapeError(f"a_bar must be (channels, state), got {a_bar.shape}")
        if b_bar.shape != a_bar.shape or c_bar.shape != a_bar.shape:
            raise ShapeError("b_bar and c_bar must match a_bar")
        if d.shape != (a_bar.shape[0],) or delta.shape != (a_bar.shape[0],):
            raise ShapeError("d and delta must be (channels,)")
        if np.any(delta <= 0.0):
            raise ValueError("timescale must be strictly positive")
        if np.any(a_bar < 0.0) or np.any(a_bar >= 1.0):
            raise ValueError("step transition must lie in [0, 1)")
        for field, arr in (
            ("a_bar", a_bar),
            ("b_bar", b_bar),
            ("c_bar", c_bar),
            ("d", d),
            ("delta", delta),
        ):
            object.__setattr__(self, field, arr)


@dataclass(frozen=True)
class SelectiveScanInput:
    """Per-step scan inputs: signal, timescales, and input/read-out weights.

    ``x`` and ``delta_seq`` are (length, channels); ``b_seq`` and ``c_seq``
    are (length, state) and are shared across channels at each step.
    """

    x: np.ndarray
    delta_seq: np.ndarray
    b_seq: np.ndarray
    c_seq: np.ndarray

    def __post_init__(self):
        x = _as_float_array(self.x, "x")
        delta_seq = _as_float_array(self.delta_seq, "delta_seq")
        b_seq = _as_float_array(self.b_seq, "b_seq")
        c_seq = _as_float_array(self.c_seq, "c_seq")
        if x.ndim != 2:
            raise ShapeError(f"x must be (length, channels), got {x.shape}")
        if delta_seq.shape != x.shape:
            raise ShapeError(
                f"delta_seq {delta_seq.shape} does not match x {x.shape}"
            )
        if b_seq.ndim != 2 or c_seq.shape != b_seq.shape or b_seq.shape[0] != x.shape[0]:
            raise ShapeError(
                f"b_seq {b_seq.shape} / c_seq {c_seq.shape} do not share length {x.shape[0]}"
            )
        if np.any(delta_seq <= 0.0):
            raise ValueError("delta_seq must be strictly positive")
        for field, arr in (
            ("x", x),
            ("delta_seq", delta_seq),
            ("b_seq", b_seq),
            ("c_seq", c_seq),
        ):
            object.__setattr__(self, field, arr)

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    @property
    def state_size(self) -> int:
        return self.b_seq.shape[1]


def time_invariant_input(
    x, delta, b, c_proj
) -> SelectiveScanInput:
    """Tile fixed per-channel timescales and state weights along a signal."""
    x = _as_float_array(x, "x")
    if x.ndim != 2:
        raise ShapeError(f"x must be (length, channels), got {x.shape}")
    length = x.shape[0]
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (x.shape[1],))
    b = np.asarray(b, dtype=np.float64)
    c_proj = np.asarray(c_proj, dtype=np.float64)
    return SelectiveScanInput(
        x=x,
        delta_seq=np.tile(delta, (length, 1)),
        b_seq=np.tile(b, (length, 1)),
        c_seq=np.tile(c_proj, (length, 1)),
    )


# ---------------------------------------------------------------------------
# continuous-time reference

def simulate_ode(ssm: ContinuousSSM, x, dt: float, steps: int) -> np.ndarray:
    """Integrate the ODE with classical RK4 from h(0) = 0.

    ``x`` is held piecewise constant over each step; returns the output
    trajectory sampled at t = dt, 2*dt, ..., steps*dt.  Reference oracle
    only — quartic accuracy, linear cost.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.broadcast_to(np.asarray(x, dtype=np.float64), (steps, ssm.channels))
    h = np.zeros((ssm.channels, ssm.state_size))
    y = np.empty((steps, ssm.channels))
    for k in range(steps):
        drive = ssm.b * x[k][:, None]
        k1 = ssm.a * h + drive
        k2 = ssm.a * (h + 0.5 * dt * k1) + drive
        k3 = ssm.a * (h + 0.5 * dt * k2) + drive
        k4 = ssm.a * (h + dt * k3) + drive
        h = h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        y[k] = (ssm.c_proj * h).sum(axis=-1) + ssm.d * x[k]
    return y


# ---------------------------------------------------------------------------
# discretization

def zoh_discretize(ssm: ContinuousSSM, delta) -> DiscretizedSSM:
    """Exact zero-order hold: a_bar = e^{delta a}, b_bar = (a_bar - 1)/a * b."""
    delta = np.broadcast_to(
        np.asarray(delta, dtype=np.float64), (ssm.channels,)
    ).copy()
    if np.any(delta <= 0.0):
        raise ValueError("timescale must be strictly positive")
    if np.any(ssm.a == 0.0):
        raise ValueError("evolution diagonal has a zero entry")
    a_bar = np.exp(delta[:, None] * ssm.a)
    # expm1 keeps (e^{delta a} - 1) accurate when delta a is near zero.
    b_bar = np.expm1(delta[:, None] * ssm.a) / ssm.a * ssm.b
    return DiscretizedSSM(
        a_bar=a_bar,
        b_bar=b_bar,
        c_bar=ssm.c_proj.copy(),
        d=ssm.d.copy(),
        delta=delta,
    )


def taylor_discretize_b(delta, b) -> np.ndarray:
    """First-order input weight: b_bar = delta * b elementwise."""
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if delta.ndim == b.ndim - 1:
        delta = delta[..., None]
    return delta * b


def discrete_step(dssm: DiscretizedSSM, h: np.ndarray, x: np.ndarray):
    """One step of the recurrence: returns (h_next, y)."""
    h_next = dssm.a_bar * h + dssm.b_bar * x[:, None]
    y = (dssm.c_bar * h_next).sum(axis=-1) + dssm.d * x
    return h_next, y


# ---------------------------------------------------------------------------
# sequence scans (numpy; the differentiable path is selective_scan below)

def _step_weights(inp: SelectiveScanInput, a: np.ndarray):
    # Per-step transition and driven input, first-order in delta for the
    # input weight: a_k = e^{delta_k a}, (b x)_k = delta_k b_k x_k.
    a_bar = np.exp(inp.delta_seq[:, :, None] * a[None])
    bx = inp.delta_seq[:, :, None] * inp.b_seq[:, None, :] * inp.x[:, :, None]
    return a_bar, bx


def _check_scan_params(inp: SelectiveScanInput, a, d):
    a = _as_float_array(a, "a")
    d = _as_float_array(d, "d")
    if a.shape != (inp.channels, inp.state_size):
        raise ShapeError(
            f"a {a.shape} does not match input ({inp.channels}, {inp.state_size})"
        )
    if d.shape != (inp.channels,):
        raise ShapeError(f"d must be (channels,), got {d.shape}")
    return a, d


def scan_sequential(inp: SelectiveScanInput, a, d) -> np.ndarray:
    """Left-to-right recurrence from h = 0; ground truth for the other scans."""
    a, d = _check_scan_params(inp, a, d)
    a_bar, bx = _step_weights(inp, a)
    h = np.zeros((inp.channels, inp.state_size))
    y = np.empty((inp.length, inp.channels))
    for k in range(inp.length):
        h = a_bar[k] * h + bx[k]
        y[k] = h @ inp.c_seq[k] + d * inp.x[k]
    return y


def scan_parallel(
    inp: SelectiveScanInput,
    a,
    d,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
) -> np.ndarray:
    """Blocked associative scan; output matches scan_sequential to rounding."""
    a, d = _check_scan_params(inp, a, d)
    a_bar, bx = _step_weights(inp, a)
    y = scan_kernel.ssm_apply(a_bar, bx, inp.c_seq, block=block, threads=threads)
    return y + inp.x * d[None]


# ---------------------------------------------------------------------------
# selective scan: input-dependent parameters, differentiable end-to-end

@dataclass
class SelectiveScanParams:
    """Learned maps from the signal to per-step scan parameters.

    ``a_log`` stores log(-a) so the evolution diagonal stays negative; the
    timescale is softplus(x @ w_delta + b_delta) so it stays positive.
    """

    a_log: Tensor
    d: Tensor
    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    w_c: Tensor

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]


def softplus_inverse(value: np.ndarray) -> np.ndarray:
    """Solve softplus(x) = value for x; value must be positive."""
    value = np.asarray(value, dtype=np.float64)
    return value + np.log(-np.expm1(-value))


def init_selective_params(
    channels: int,
    state_size: int = DEFAULT_STATE_SIZE,
    rng: np.random.Generator | None = None,
) -> SelectiveScanParams:
    """Standard initialization for a selective scan over ``channels`` lanes.

    The evolution diagonal starts at -(1 + i) for state index i, the skip at
    one, and the timescale bias so that softplus(bias) is log-uniform in
    DELTA_INIT_RANGE.  Projection weights are small Gaussians.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = DELTA_INIT_RANGE
    delta_init = np.exp(rng.uniform(np.log(lo), np.log(hi), size=channels))
    bound = channels ** -0.5
    grad = dict(requires_grad=True)
    return SelectiveScanParams(
        a_log=Tensor(
            np.tile(np.log1p(np.arange(state_size, dtype=np.float64)), (channels, 1)),
            **grad,
        ),
        d=Tensor(np.ones(channels), **grad),
        w_delta=Tensor(rng.uniform(-bound, bound, size=(channels, channels)), **grad),
        b_delta=Tensor(softplus_inverse(delta_init), **grad),
        w_b=Tensor(rng.uniform(-bound, bound, size=(channels, state_size)), **grad),
        w_c=Tensor(rng.uniform(-bound, bound, size=(channels, state_size)), **grad),
    )


def selective_inputs(x: np.ndarray, params: SelectiveScanParams) -> SelectiveScanInput:
    """Materialize the per-step parameters for one unbatched signal."""
    x = _as_float_array(x, "x")
    raw = x @ params.w_delta.data + params.b_delta.data
    return SelectiveScanInput(
        x=x,
        delta_seq=np.logaddexp(0.0, raw),
        b_seq=x @ params.w_b.data,
        c_seq=x @ params.w_c.data,
    )


def selective_scan(
    x,
    params: SelectiveScanParams,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
) -> Tensor:
    """Scan with input-dependent timescale and weights; differentiable.

    ``x`` has shape (..., length, channels); per-step parameters come from
    the learned projections and the input weight uses the first-order form
    delta * b.  Returns y of the same shape as ``x``.
    """
    x = ops.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != params.channels:
        raise ShapeError(
            f"signal {x.shape} does not end in {params.channels} channels"
        )
    delta = ops.softplus(ops.linear(x, params.w_delta, params.b_delta))
    b_seq = ops.linear(x, params.w_b)
    c_seq = ops.linear(x, params.w_c)

    a = ops.neg(ops.exp(params.a_log))
    delta_col = ops.reshape(delta, delta.shape + (1,))
    x_col = ops.reshape(x, x.shape + (1,))
    b_row = ops.reshape(b_seq, b_seq.shape[:-1] + (1, b_seq.shape[-1]))
    a_bar = ops.exp(ops.mul(delta_col, a))
    bx = ops.mul(ops.mul(delta_col, x_col), b_row)
    y = ops.ssm_scan(a_bar, bx, c_seq, block=block, threads=threads)
    return ops.add(y, ops.mul(x, params.d))
