"""Hierarchical encoder-bottleneck-decoder segmentation model.

An image is cut into non-overlapping patches and embedded; three encoder
stages of VSS blocks each end in a patch merge that quarters the token
count and doubles the channels.  After a VSS bottleneck, three decoder
stages mirror the encoder: patch expand, fusion with the same-resolution
encoder output, and VSS blocks.  A final 4x expand restores full
resolution before the linear class head.

Every learned array has a canonical dotted name; one walk of the
architecture (``param_specs``) fixes naming, initialization, parameter
counting, and the serialization order used by ``weights_io``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from . import cross_scan, vss
from .nd import Tensor, ops, scan_kernel
from .nd.tensor import ShapeError
from .rng import stream
from .ssm import DELTA_INIT_RANGE, softplus_inverse


class ConfigError(ValueError):
    """A model configuration document is malformed or inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; all sizes in pixels or channels."""

    input_h: int
    input_w: int
    num_classes: int
    in_channels: int = 1
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 2)
    bottleneck_depth: int = 2
    patch_size: int = 4
    state_size: int = 16
    expansion_ratio: int = 2
    kernel_size: int = 3
    share_projections: bool = False
    gate: str = "multiply"
    norm_after_gate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        positive = (
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("bottleneck_depth", self.bottleneck_depth),
            ("patch_size", self.patch_size),
            ("state_size", self.state_size),
            ("expansion_ratio", self.expansion_ratio),
            ("kernel_size", self.kernel_size),
        )
        for name, value in positive:
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be positive, got {self.depths}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.gate not in vss.GATE_MODES:
            raise ConfigError(f"gate must be one of {vss.GATE_MODES}")
        divisor = self.patch_size << self.num_stages
        if self.input_h % divisor or self.input_w % divisor:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} not divisible by {divisor} "
                f"(patch {self.patch_size} with {self.num_stages} halvings)"
            )

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        """Channel width at encoder stage ``stage`` (0-based; num_stages = bottleneck)."""
        return self.embed_dim << stage

    @property
    def token_h(self) -> int:
        return self.input_h // self.patch_size

    @property
    def token_w(self) -> int:
        return self.input_w // self.patch_size


_CONFIG_FIELDS = None


def _config_fields() -> dict:
    global _CONFIG_FIELDS
    if _CONFIG_FIELDS is None:
        _CONFIG_FIELDS = {f.name: f for f in fields(ModelConfig)}
    return _CONFIG_FIELDS


def config_from_json(text: str) -> ModelConfig:
    """Parse a strict JSON config: unknown keys and wrong types are errors."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = _config_fields()
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(
        name for name in ("input_h", "input_w", "num_classes") if name not in doc
    )
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    if "depths" in doc:
        if not isinstance(doc["depths"], list):
            raise ConfigError("depths must be a JSON array")
        doc["depths"] = tuple(doc["depths"])
    return ModelConfig(**doc)


def config_to_json(cfg: ModelConfig) -> str:
    doc = {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}
    doc["depths"] = list(doc["depths"])
    return json.dumps(doc, indent=2) + "\n"


# ---------------------------------------------------------------------------
# parameter inventory

@dataclass(frozen=True)
class ParamSpec:
    """Name, shape, and initialization rule of one learned array."""

    name: str
    shape: tuple[int, ...]
    kind: str  # dense | zeros | ones | a_log | delta_bias
    fan: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


def _norm_specs(prefix: str, dim: int) -> list[ParamSpec]:
    return [
        ParamSpec(prefix + ".gain", (dim,), "ones"),
        ParamSpec(prefix + ".bias", (dim,), "zeros"),
    ]


def _linear_specs(prefix: str, fan_in: int, fan_out: int) -> list[ParamSpec]:
    return [
        ParamSpec(prefix + ".weight", (fan_in, fan_out), "dense", fan=fan_in),
        ParamSpec(prefix + ".bias", (fan_out,), "zeros"),
    ]


def _vss_specs(prefix: str, dim: int, cfg: ModelConfig) -> list[ParamSpec]:
    e = cfg.expansion_ratio * dim
    n = cfg.state_size
    k = cfg.kernel_size
    g = 1 if cfg.share_projections else cross_scan.NUM_DIRECTIONS
    specs = _norm_specs(prefix + "pre_norm", dim)
    specs += _linear_specs(prefix + "in_proj_a", dim, e)
    specs += _linear_specs(prefix + "in_proj_b", dim, e)
    specs += [ParamSpec(prefix + "dw_conv.kernels", (k, k, e), "dense", fan=k * k)]
    specs += [
        ParamSpec(prefix + "ssm.a_log", (cross_scan.NUM_DIRECTIONS, e, n), "a_log"),
        ParamSpec(prefix + "ssm.d", (cross_scan.NUM_DIRECTIONS, e), "ones"),
        ParamSpec(prefix + "ssm.w_delta", (g, e, e), "dense", fan=e),
        ParamSpec(prefix + "ssm.b_delta", (g, e), "delta_bias"),
        ParamSpec(prefix + "ssm.w_b", (g, e, n), "dense", fan=e),
        ParamSpec(prefix + "ssm.w_c", (g, e, n), "dense", fan=e),
    ]
    specs += _norm_specs(prefix + "post_norm", e)
    specs += _linear_specs(prefix + "out_proj", e, dim)
    return specs


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every learned array of the model, in canonical serialization order."""
    c = cfg.embed_dim
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    specs = _linear_specs("patch_embed", patch_in, c)
    specs += _norm_specs("patch_embed.norm", c)

    for s in range(cfg.num_stages):
        dim = cfg.stage_dim(s)
        for i in range(cfg.depths[s]):
            specs += _vss_specs(f"encoder.{s}.block.{i}.", dim, cfg)
        specs += _norm_specs(f"encoder.{s}.merge.norm", 4 * dim)
        specs += _linear_specs(f"encoder.{s}.merge", 4 * dim, 2 * dim)

    mid = cfg.stage_dim(cfg.num_stages)
    for i in range(cfg.bottleneck_depth):
        specs += _vss_specs(f"bottleneck.block.{i}.", mid, cfg)

    for s in range(cfg.num_stages):
        wide = cfg.stage_dim(cfg.num_stages - s)
        dim = wide // 2
        specs += _linear_specs(f"decoder.{s}.expand", wide, 2 * wide)
        specs += _norm_specs(f"decoder.{s}.expand.norm", dim)
        specs += _linear_specs(f"decoder.{s}.fuse", 2 * dim, dim)
        for i in range(cfg.depths[cfg.num_stages - 1 - s]):
            specs += _vss_specs(f"decoder.{s}.block.{i}.", dim, cfg)

    final = cfg.patch_size * cfg.patch_size * c
    specs += _linear_specs("final_expand", c, final)
    specs += _norm_specs("final_expand.norm", c)
    specs += _linear_specs("head", c, cfg.num_classes)
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    """Total learned scalars, computed from the inventory alone."""
    return sum(spec.size for spec in param_specs(cfg))


def _init_array(spec: ParamSpec, seed: int) -> np.ndarray:
    if spec.kind == "zeros":
        return np.zeros(spec.shape)
    if spec.kind == "ones":
        return np.ones(spec.shape)
    if spec.kind == "a_log":
        row = np.log1p(np.arange(spec.shape[-1], dtype=np.float64))
        return np.tile(row, spec.shape[:-1] + (1,))
    rng = stream(seed, "init", spec.name)
    if spec.kind == "dense":
        bound = spec.fan ** -0.5
        return rng.uniform(-bound, bound, size=spec.shape)
    if spec.kind == "delta_bias":
        lo, hi = DELTA_INIT_RANGE
        return softplus_inverse(
            np.exp(rng.uniform(np.log(lo), np.log(hi), size=spec.shape))
        )
    raise ValueError(f"unknown parameter kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# weights container

class ModelWeights:
    """Canonical parameter dict plus structured views for the forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        specs = param_specs(config)
        expected = [spec.name for spec in specs]
        if list(params) != expected:
            raise ShapeError("parameter names do not match the config inventory")
        for spec in specs:
            if params[spec.name].shape != spec.shape:
                raise ShapeError(
                    f"{spec.name}: shape {params[spec.name].shape} != {spec.shape}"
                )
        self.config = config
        self.params = dict(params)
        self._build_views()

    def _build_views(self):
        p = self.params
        cfg = self.config
        self.embed = (
            p["patch_embed.weight"],
            p["patch_embed.bias"],
            p["patch_embed.norm.gain"],
            p["patch_embed.norm.bias"],
        )
        self.enc_blocks = [
            [
                self._block(f"encoder.{s}.block.{i}.")
                for i in range(cfg.depths[s])
            ]
            for s in range(cfg.num_stages)
        ]
        self.merges = [
            (
                p[f"encoder.{s}.merge.norm.gain"],
                p[f"encoder.{s}.merge.norm.bias"],
                p[f"encoder.{s}.merge.weight"],
                p[f"encoder.{s}.merge.bias"],
            )
            for s in range(cfg.num_stages)
        ]
        self.mid_blocks = [
            self._block(f"bottleneck.block.{i}.")
            for i in range(cfg.bottleneck_depth)
        ]
        self.expands = [
            (
                p[f"decoder.{s}.expand.weight"],
                p[f"decoder.{s}.expand.bias"],
                p[f"decoder.{s}.expand.norm.gain"],
                p[f"decoder.{s}.expand.norm.bias"],
            )
            for s in range(cfg.num_stages)
        ]
        self.fuses = [
            (p[f"decoder.{s}.fuse.weight"], p[f"decoder.{s}.fuse.bias"])
            for s in range(cfg.num_stages)
        ]
        self.dec_blocks = [
            [
                self._block(f"decoder.{s}.block.{i}.")
                for i in range(cfg.depths[cfg.num_stages - 1 - s])
            ]
            for s in range(cfg.num_stages)
        ]
        self.final = (
            p["final_expand.weight"],
            p["final_expand.bias"],
            p["final_expand.norm.gain"],
            p["final_expand.norm.bias"],
        )
        self.head = (p["head.weight"], p["head.bias"])

    def _block(self, prefix: str) -> vss.VSSBlockWeights:
        p = self.params
        return vss.VSSBlockWeights(
            pre_norm_gain=p[prefix + "pre_norm.gain"],
            pre_norm_bias=p[prefix + "pre_norm.bias"],
            w_in_a=p[prefix + "in_proj_a.weight"],
            b_in_a=p[prefix + "in_proj_a.bias"],
            w_in_b=p[prefix + "in_proj_b.weight"],
            b_in_b=p[prefix + "in_proj_b.bias"],
            dw_kernels=p[prefix + "dw_conv.kernels"],
            ssm=cross_scan.SS2DParams(
                a_log=p[prefix + "ssm.a_log"],
                d=p[prefix + "ssm.d"],
                w_delta=p[prefix + "ssm.w_delta"],
                b_delta=p[prefix + "ssm.b_delta"],
                w_b=p[prefix + "ssm.w_b"],
                w_c=p[prefix + "ssm.w_c"],
            ),
            post_norm_gain=p[prefix + "post_norm.gain"],
            post_norm_bias=p[prefix + "post_norm.bias"],
            w_out=p[prefix + "out_proj.weight"],
            b_out=p[prefix + "out_proj.bias"],
        )

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Deterministic initialization: each array from its own named stream."""
    params = {
        spec.name: Tensor(_init_array(spec, seed), requires_grad=True)
        for spec in param_specs(cfg)
    }
    return ModelWeights(cfg, params)


# ---------------------------------------------------------------------------
# spatial rearrangements

def _space_to_depth(x: Tensor, r: int) -> Tensor:
    # (..., H, W, C) -> (..., H/r, W/r, r*r*C); within a token the layout is
    # patch row, then patch column, then channel (channel fastest).
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    m = len(lead)
    x = ops.reshape(x, lead + (h // r, r, w // r, r, c))
    x = ops.transpose(x, tuple(range(m)) + (m, m + 2, m + 1, m + 3, m + 4))
    return ops.reshape(x, lead + (h // r, w // r, r * r * c))


def _depth_to_space(x: Tensor, r: int) -> Tensor:
    # Exact inverse of _space_to_depth.
    h, w, c_full = x.shape[-3:]
    c = c_full // (r * r)
    lead = x.shape[:-3]
    m = len(lead)
    x = ops.reshape(x, lead + (h, w, r, r, c))
    x = ops.transpose(x, tuple(range(m)) + (m, m + 2, m + 1, m + 3, m + 4))
    return ops.reshape(x, lead + (h * r, w * r, c))


def patch_embed(image, weight, bias, gain, norm_bias, patch_size: int) -> Tensor:
    """Flatten non-overlapping patches, project, and normalize."""
    image = ops.as_tensor(image)
    if image.ndim < 3:
        raise ShapeError(f"image must be (..., H, W, C), got {image.shape}")
    h, w = image.shape[-3], image.shape[-2]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"{h}x{w} not divisible by patch size {patch_size}")
    tokens = _space_to_depth(image, patch_size)
    return ops.layer_norm(ops.linear(tokens, weight, bias), gain, norm_bias)


def patch_merge(x, gain, norm_bias, weight, bias) -> Tensor:
    """Concatenate 2x2 neighborhoods, normalize, and halve the width."""
    x = ops.as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise ShapeError(f"patch merge needs even extents, got {h}x{w}")
    grouped = _space_to_depth(x, 2)
    return ops.linear(ops.layer_norm(grouped, gain, norm_bias), weight, bias)


def patch_expand(x, weight, bias, gain, norm_bias, factor: int = 2) -> Tensor:
    """Widen channels, redistribute them over a factor x factor block, normalize."""
    x = ops.as_tensor(x)
    widened = weight.shape[1] if isinstance(weight, Tensor) else np.shape(weight)[1]
    if widened % (factor * factor):
        raise ShapeError(
            f"expanded width {widened} not divisible by {factor * factor}"
        )
    y = ops.linear(x, weight, bias)
    y = _depth_to_space(y, factor)
    return ops.layer_norm(y, gain, norm_bias)


def skip_fuse(decoder_feat, encoder_feat, weight, bias) -> Tensor:
    """Concatenate same-resolution features and project back to one width."""
    decoder_feat = ops.as_tensor(decoder_feat)
    encoder_feat = ops.as_tensor(encoder_feat)
    if decoder_feat.shape != encoder_feat.shape:
        raise ShapeError(
            f"skip shapes differ: {decoder_feat.shape} vs {encoder_feat.shape}"
        )
    return ops.linear(ops.concat([decoder_feat, encoder_feat], axis=-1), weight, bias)


# ---------------------------------------------------------------------------
# full model

def forward(
    image,
    weights: ModelWeights,
    block: int = scan_kernel.DEFAULT_BLOCK,
    threads: int = 1,
    trace: list | None = None,
) -> Tensor:
    """Image (..., H, W, in_channels) to logits (..., H, W, num_classes)."""
    cfg = weights.config
    image = ops.as_tensor(image)
    if image.ndim < 3 or image.shape[-3:] != (cfg.input_h, cfg.input_w, cfg.in_channels):
        raise ShapeError(
            f"image {image.shape} does not match configured "
            f"{cfg.input_h}x{cfg.input_w}x{cfg.in_channels}"
        )

    def note(label, t):
        if trace is not None:
            trace.append((label, t.shape[-3:]))

    def run_blocks(t, blocks):
        for blk in blocks:
            t = vss.vss_forward(
                t,
                blk,
                gate=cfg.gate,
                norm_after_gate=cfg.norm_after_gate,
                block=block,
                threads=threads,
            )
        return t

    x = patch_embed(image, *weights.embed, cfg.patch_size)
    note("embed", x)
    skips = []
    for s in range(cfg.num_stages):
        x = run_blocks(x, weights.enc_blocks[s])
        note(f"encoder.{s}", x)
        skips.append(x)
        x = patch_merge(x, *weights.merges[s])

    x = run_blocks(x, weights.mid_blocks)
    note("bottleneck", x)

    for s in range(cfg.num_stages):
        x = patch_expand(x, *weights.expands[s])
        x = skip_fuse(x, skips[cfg.num_stages - 1 - s], *weights.fuses[s])
        x = run_blocks(x, weights.dec_blocks[s])
        note(f"decoder.{s}", x)

    x = patch_expand(x, *weights.final, factor=cfg.patch_size)
    note("final", x)
    logits = ops.linear(x, *weights.head)
    note("logits", logits)
    return logits
