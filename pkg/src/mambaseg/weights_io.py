"""Binary weight files: magic, version, config block, parameters, checksum.

Layout (all integers little-endian):

    bytes 0-3    magic "MUNT"
    bytes 4-7    format version (u32)
    next         config block: u32 fields in the order given by _config_ints
                 (the depths list is length-prefixed)
    next         parameters in canonical order, float64 little-endian, no
                 per-array framing (shapes are implied by the config)
    last 8       checksum: first 8 bytes of SHA-256 over the parameter bytes

Loading validates magic, version, config, payload length, and checksum
before constructing any weights; a bad file never yields a partial model.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile

import numpy as np

from . import unet, vss
from .nd import Tensor

MAGIC = b"MUNT"
VERSION = 1

_FIXED_TAIL_FIELDS = 9  # ints after the depths list
_FIXED_HEAD_FIELDS = 5  # ints before it, including the length prefix


class WeightFormatError(ValueError):
    """A weight file is malformed, truncated, or fails its checksum."""


def _config_ints(cfg: unet.ModelConfig) -> list[int]:
    return [
        cfg.input_h,
        cfg.input_w,
        cfg.in_channels,
        cfg.embed_dim,
        len(cfg.depths),
        *cfg.depths,
        cfg.bottleneck_depth,
        cfg.num_classes,
        cfg.patch_size,
        cfg.state_size,
        cfg.expansion_ratio,
        cfg.kernel_size,
        int(cfg.share_projections),
        vss.GATE_MODES.index(cfg.gate),
        int(cfg.norm_after_gate),
    ]


def _config_from_ints(values: list[int]) -> unet.ModelConfig:
    head, rest = values[:_FIXED_HEAD_FIELDS], values[_FIXED_HEAD_FIELDS:]
    input_h, input_w, in_channels, embed_dim, num_stages = head
    depths, tail = rest[:num_stages], rest[num_stages:]
    if len(depths) != num_stages or len(tail) != _FIXED_TAIL_FIELDS:
        raise WeightFormatError("config block has the wrong field count")
    (
        bottleneck_depth,
        num_classes,
        patch_size,
        state_size,
        expansion_ratio,
        kernel_size,
        share_projections,
        gate_code,
        norm_after_gate,
    ) = tail
    if gate_code >= len(vss.GATE_MODES):
        raise WeightFormatError(f"unknown gate code {gate_code}")
    return unet.ModelConfig(
        input_h=input_h,
        input_w=input_w,
        num_classes=num_classes,
        in_channels=in_channels,
        embed_dim=embed_dim,
        depths=tuple(depths),
        bottleneck_depth=bottleneck_depth,
        patch_size=patch_size,
        state_size=state_size,
        expansion_ratio=expansion_ratio,
        kernel_size=kernel_size,
        share_projections=bool(share_projections),
        gate=vss.GATE_MODES[gate_code],
        norm_after_gate=bool(norm_after_gate),
    )


def file_size(cfg: unet.ModelConfig) -> int:
    """Exact on-disk size in bytes for this config."""
    header = len(MAGIC) + 4 + 4 * len(_config_ints(cfg))
    return header + 8 * unet.parameter_count(cfg) + 8


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_weights(weights: unet.ModelWeights, path: str) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    cfg = weights.config
    ints = _config_ints(cfg)
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack(f"<{len(ints)}I", *ints)
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        for t in weights.params.values()
    )
    blob = header + payload + _checksum(payload)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_weights(path: str) -> unet.ModelWeights:
    with open(path, "rb") as handle:
        blob = handle.read()

    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != VERSION:
        raise WeightFormatError(f"unsupported format version {version}")

    fixed = _FIXED_HEAD_FIELDS
    if len(blob) < offset + 4 * fixed:
        raise WeightFormatError("truncated config block")
    head = list(struct.unpack_from(f"<{fixed}I", blob, offset))
    num_stages = head[-1]
    total_fields = fixed + num_stages + _FIXED_TAIL_FIELDS
    if len(blob) < offset + 4 * total_fields:
        raise WeightFormatError("truncated config block")
    ints = list(struct.unpack_from(f"<{total_fields}I", blob, offset))
    offset += 4 * total_fields

    try:
        cfg = _config_from_ints(ints)
    except unet.ConfigError as exc:
        raise WeightFormatError(f"invalid stored config: {exc}") from None

    specs = unet.param_specs(cfg)
    expected = 8 * sum(spec.size for spec in specs)
    if len(blob) != offset + expected + 8:
        raise WeightFormatError(
            f"payload size {len(blob) - offset - 8} != expected {expected}"
        )
    payload = blob[offset : offset + expected]
    if _checksum(payload) != blob[-8:]:
        raise WeightFormatError("checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = {}
    cursor = 0
    for spec in specs:
        chunk = flat[cursor : cursor + spec.size]
        cursor += spec.size
        params[spec.name] = Tensor(chunk.reshape(spec.shape), requires_grad=True)
    return unet.ModelWeights(cfg, params)
