"""Four-direction traversal of 2-D feature maps (the SS2D mechanism).

A feature map has no causal order, so it is unfolded into four directed
1-D sequences — rows forward and backward, columns forward and backward —
each scanned by its own selective state-space model, and the four results
are folded back to the grid and summed.  The traversal orders are pure
permutations, so expand and merge are exact adjoints of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .nd import Tensor, ops, scan_kernel
from .nd.tensor import ShapeError
from .ssm import DELTA_INIT_RANGE, softplus_inverse

DIRECTIONS = ("row-forward", "row-backward", "col-forward", "col-backward")
NUM_DIRECTIONS = len(DIRECTIONS)


@dataclass(frozen=True)
class DirectionalLayout:
    """One traversal order over an H x W grid, as paired permutations.

    ``forward_index[p]`` is the flat (row-major) spatial position visited at
    sequence step p; ``inverse_index`` undoes the reordering.
    """

    direction: str
    forward_index: np.ndarray
    inverse_index: np.ndarray

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        fwd = np.asarray(self.forward_index, dtype=np.intp)
        inv = np.asarray(self.inverse_index, dtype=np.intp)
        if not np.array_equal(fwd[inv], np.arange(fwd.size)):
            raise ValueError("inverse_index does not invert forward_index")
        for field, arr in (("forward_index", fwd), ("inverse_index", inv)):
            arr.setflags(write=False)
            object.__setattr__(self, field, arr)


@lru_cache(maxsize=None)
def layouts(height: int, width: int) -> tuple[DirectionalLayout, ...]:
    """The four canonical traversals of an ``height`` x ``width`` grid."""
    if height < 1 or width < 1:
        raise ValueError("grid extents must be positive")
    row_f = np.arange(height * width, dtype=np.intp)
    col_f = row_f.reshape(height, width).T.reshape(-1)
    orders = (row_f, row_f[::-1], col_f, col_f[::-1])
    return tuple(
        DirectionalLayout(name, order, np.argsort(order))
        for name, order in zip(DIRECTIONS, orders)
    )


@lru_cache(maxsize=None)
def _index_stacks(height: int, width: int):
    stack = layouts(height, width)
    orders = np.stack([lay.forward_index for lay in stack])
    inverses = np.stack([lay.inverse_index for lay in stack])
    orders.setflags(write=False)
    inverses.setflags(write=False)
    return orders, inverses


def expand(feature) -> Tensor:
    """Unfold (..., H, W, C) into the four directed sequences (..., 4, H*W, C)."""
    feature = ops.as_tensor(feature)
    if feature.ndim < 3:
        raise ShapeError(f"feature must be (..., H, W, C), got {feature.shape}")
    height, width, channels = feature.shape[-3:]
    orders, inverses = _index_stacks(height, width)
    flat = ops.reshape(feature, feature.shape[:-3] + (height * width, channels))
    return ops.take_positions(flat, orders, inverses)


def merge(sequences, height: int, width: int) -> Tensor:
    """Fold the four scanned sequences back to the grid and sum them."""
    sequences = ops.as_tensor(sequences)
    expected = (NUM_DIRECTIONS, height * width)
    if sequences.ndim < 3 or sequences.shape[-3:-1] != expected:
        raise ShapeError(
            f"sequences {sequences.shape} do not match {NUM_DIRECTIONS} x {height * width}"
        )
    orders, inverses = _index_stacks(height, width)
    restored = ops.gather_positions(sequences, inverses, orders)
    summed = ops.sum(restored, axis=-3)
    out_shape = sequences.shape[:-3] + (height, width, sequences.shape[-1])
    return ops.reshape(summed, out_shape)


@dataclass
class SS2DParams:
    """Selective-scan parameters for the four directions.

    Every array carries a leading direction axis in the canonical order of
    DIRECTIONS.  ``a_log`` and ``d`` are always per-direction; the delta/B/C
    projections have leading extent 4 when independent or 1 when shared
    across directions.
    """

    a_log: Tensor
    d: Tensor
    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    w_c: Tensor

    @property
    def channels(self) -> int:
        return self.a_log.shape[1]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[2]

    @property
    def shared_projections(self) -> bool:
        return self.w_delta.shape[0] == 1


def init_ss2d_params(
    channels: int,
    state_size: int,
    rng: np.random.Generator,
    share_projections: bool = False,
) -> SS2DParams:
    """Initialize four-direction scan parameters (see init_selective_params)."""
    groups = 1 if share_projections else NUM_DIRECTIONS
    lo, hi = DELTA_INIT_RANGE
    delta_init = np.exp(
        rng.uniform(np.log(lo), np.log(hi), size=(groups, channels))
    )
    bound = channels ** -0.5
    grad = dict(requires_grad=True)
    a_row = np.log1p(np.arange(state_size, dtype=np.float64))
    return SS2DParams(
        a_log=Tensor(
            np.tile(a_row, (NUM_DIRECTIONS, channels, 1)), **grad
        ),
        d=Tensor(np.ones((NUM_DIRECTIONS, channels)), **grad),
        w_delta=Tensor(
            rng.uniform(-bound, bound, size=(groups, channels, channels)), **grad
        ),
        b_delta=Tensor(softplus_inverse(delta_init), **grad),
        w_b=Tensor(rng.uniform(-bound, bound, size=(groups, channels, state_size)), **grad),
        w_c=Tensor(rng.uniform(-bound, bound, size=(groups, channels, state_size)), **grad),
    )


def _per_direction(t: Tensor) -> Tensor:
    # Shared projections enter the grouped ops tiled; the tape accumulates
    # all four adjoint contributions back onto the single parameter.
    if t.shape[0] == NUM_DIRECTIONS:
        return t
    return ops.concat([t] * NUM_DIRECTIONS, axis=0)


def ss2d_branches(
    feature,
    params: SS2DParams,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
) -> Tensor:
    """Per-direction scan outputs in sequence order, shape (..., 4, H*W, C)."""
    feature = ops.as_tensor(feature)
    if feature.ndim < 3 or feature.shape[-1] != params.channels:
        raise ShapeError(
            f"feature {feature.shape} does not end in {params.channels} channels"
        )
    seqs = expand(feature)
    w_delta = _per_direction(params.w_delta)
    b_delta = _per_direction(params.b_delta)
    delta = ops.softplus(ops.grouped_linear(seqs, w_delta, b_delta))
    b_seq = ops.grouped_linear(seqs, _per_direction(params.w_b))
    c_seq = ops.grouped_linear(seqs, _per_direction(params.w_c))

    state = params.state_size
    a = ops.neg(ops.exp(params.a_log))
    a_wide = ops.reshape(a, (NUM_DIRECTIONS, 1, params.channels, state))
    delta_col = ops.reshape(delta, delta.shape + (1,))
    x_col = ops.reshape(seqs, seqs.shape + (1,))
    b_row = ops.reshape(b_seq, b_seq.shape[:-1] + (1, state))
    a_bar = ops.exp(ops.mul(delta_col, a_wide))
    bx = ops.mul(ops.mul(delta_col, x_col), b_row)
    y = ops.ssm_scan(a_bar, bx, c_seq, block=block, threads=threads)
    skip = ops.reshape(params.d, (NUM_DIRECTIONS, 1, params.channels))
    return ops.add(y, ops.mul(seqs, skip))


def ss2d(
    feature,
    params: SS2DParams,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
) -> Tensor:
    """Expand, scan each direction, merge: shape-preserving over (..., H, W, C)."""
    feature = ops.as_tensor(feature)
    height, width = feature.shape[-3], feature.shape[-2]
    branches = ss2d_branches(feature, params, block=block, threads=threads)
    return merge(branches, height, width)
