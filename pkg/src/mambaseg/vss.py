"""The visual state-space block: dual pathways around a 2-D selective scan.

One pathway normalizes, embeds to the expansion width, applies a depthwise
convolution plus SiLU, and runs the four-direction scan; the other embeds
and activates directly and gates the first elementwise.  The gated result
is normalized, projected back to the block width, and added to the input.
There is no positional term anywhere and no MLP sub-layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cross_scan
from .nd import Tensor, ops, scan_kernel
from .nd.tensor import ShapeError

DEFAULT_EXPANSION_RATIO = 2
DEFAULT_KERNEL_SIZE = 3

GATE_MODES = ("multiply", "add")


@dataclass
class VSSBlockWeights:
    """All learned arrays of one block at feature width D, expansion E."""

    pre_norm_gain: Tensor
    pre_norm_bias: Tensor
    w_in_a: Tensor
    b_in_a: Tensor
    w_in_b: Tensor
    b_in_b: Tensor
    dw_kernels: Tensor
    ssm: cross_scan.SS2DParams
    post_norm_gain: Tensor
    post_norm_bias: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def dim(self) -> int:
        return self.w_in_a.shape[0]

    @property
    def expanded(self) -> int:
        return self.w_in_a.shape[1]

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters in a fixed canonical order, keyed by dotted path."""
        ssm = self.ssm
        pairs = (
            ("pre_norm.gain", self.pre_norm_gain),
            ("pre_norm.bias", self.pre_norm_bias),
            ("in_proj_a.weight", self.w_in_a),
            ("in_proj_a.bias", self.b_in_a),
            ("in_proj_b.weight", self.w_in_b),
            ("in_proj_b.bias", self.b_in_b),
            ("dw_conv.kernels", self.dw_kernels),
            ("ssm.a_log", ssm.a_log),
            ("ssm.d", ssm.d),
            ("ssm.w_delta", ssm.w_delta),
            ("ssm.b_delta", ssm.b_delta),
            ("ssm.w_b", ssm.w_b),
            ("ssm.w_c", ssm.w_c),
            ("post_norm.gain", self.post_norm_gain),
            ("post_norm.bias", self.post_norm_bias),
            ("out_proj.weight", self.w_out),
            ("out_proj.bias", self.b_out),
        )
        return {prefix + name: tensor for name, tensor in pairs}


def parameter_count(
    dim: int,
    expansion_ratio: int = DEFAULT_EXPANSION_RATIO,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    state_size: int = 16,
    share_projections: bool = False,
) -> int:
    """Closed-form size of one block; checked against golden stage counts."""
    e, n, k = expansion_ratio * dim, state_size, kernel_size
    groups = 1 if share_projections else cross_scan.NUM_DIRECTIONS
    ssm = (
        cross_scan.NUM_DIRECTIONS * (e * n + e)  # a_log, d
        + groups * (e * e + e + 2 * e * n)  # w_delta, b_delta, w_b, w_c
    )
    return (
        2 * dim  # pre-norm
        + 2 * (dim * e + e)  # two input projections
        + e * k * k  # depthwise kernels
        + ssm
        + 2 * e  # post-norm
        + e * dim + dim  # output projection
    )


def init_vss_weights(
    dim: int,
    state_size: int,
    rng: np.random.Generator,
    expansion_ratio: int = DEFAULT_EXPANSION_RATIO,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    share_projections: bool = False,
) -> VSSBlockWeights:
    """Gaussian fan-in initialization; norms start as the identity map."""
    if expansion_ratio < 1:
        raise ValueError("expansion ratio must be >= 1")
    e = expansion_ratio * dim
    grad = dict(requires_grad=True)

    def dense(fan_in, shape):
        bound = fan_in ** -0.5
        return Tensor(rng.uniform(-bound, bound, size=shape), **grad)

    return VSSBlockWeights(
        pre_norm_gain=Tensor(np.ones(dim), **grad),
        pre_norm_bias=Tensor(np.zeros(dim), **grad),
        w_in_a=dense(dim, (dim, e)),
        b_in_a=Tensor(np.zeros(e), **grad),
        w_in_b=dense(dim, (dim, e)),
        b_in_b=Tensor(np.zeros(e), **grad),
        dw_kernels=dense(kernel_size * kernel_size, (kernel_size, kernel_size, e)),
        ssm=cross_scan.init_ss2d_params(
            e, state_size, rng, share_projections=share_projections
        ),
        post_norm_gain=Tensor(np.ones(e), **grad),
        post_norm_bias=Tensor(np.zeros(e), **grad),
        w_out=dense(e, (e, dim)),
        b_out=Tensor(np.zeros(dim), **grad),
    )


def vss_forward(
    x,
    w: VSSBlockWeights,
    gate: str = "multiply",
    norm_after_gate: bool = False,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
) -> Tensor:
    """Apply one block to (..., H, W, D); shape-preserving and differentiable."""
    if gate not in GATE_MODES:
        raise ValueError(f"gate must be one of {GATE_MODES}, got {gate!r}")
    x = ops.as_tensor(x)
    if x.ndim < 3 or x.shape[-1] != w.dim:
        raise ShapeError(f"input {x.shape} does not end in {w.dim} channels")

    pre = ops.layer_norm(x, w.pre_norm_gain, w.pre_norm_bias)
    scan_path = ops.silu(
        ops.depthwise_conv2d(ops.linear(pre, w.w_in_a, w.b_in_a), w.dw_kernels)
    )
    scan_path = cross_scan.ss2d(scan_path, w.ssm, block=block, threads=threads)
    gate_path = ops.silu(ops.linear(pre, w.w_in_b, w.b_in_b))

    combine = ops.mul if gate == "multiply" else ops.add
    if norm_after_gate:
        merged = ops.layer_norm(
            combine(scan_path, gate_path), w.post_norm_gain, w.post_norm_bias
        )
    else:
        merged = combine(
            ops.layer_norm(scan_path, w.post_norm_gain, w.post_norm_bias),
            gate_path,
        )
    return ops.add(x, ops.linear(merged, w.w_out, w.b_out))
