"""Single-file checkpoint codec.

Layout (all integers little-endian)::

    magic "CTRLGS01" | u32 version | u32 section count
    per section: u16 name length | name | u64 payload length | payload | u32 crc32

JSON sections (``config``, ``meta``) hold UTF-8 text. Tensor sections hold a
u32 tensor count followed by named, length-prefixed tensors.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import config
from .config import RunConfig, config_from_dict
from .errors import CheckpointError, ConfigError, InvalidParameterError
from .geometry import GaussianSet
from .windows import WindowSet

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("|b1")}
_CODES = {(dt.kind, dt.itemsize): code for code, dt in _DTYPES.items()}

SECTION_ORDER = ("config", "gaussians", "field", "windows", "quantizer", "optimizer", "densify", "meta")


@dataclass
class Checkpoint:
    config: RunConfig
    gaussians: GaussianSet
    field_state: dict[str, torch.Tensor]
    windows: WindowSet | None = None
    q: float = config.QUANTIZATION
    optimizer: dict[str, torch.Tensor] | None = None
    densify: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def _encode_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy())
        code = _CODES.get((array.dtype.kind, array.dtype.itemsize))
        if code is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {array.dtype}")
        array = array.astype(_DTYPES[code], copy=False)
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        data = array.tobytes()
        parts.append(struct.pack("<Q", len(data)) + data)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(f"{self.what}: truncated (needed {count} bytes at offset {self.pos})")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_tensors(payload: bytes, section: str) -> dict[str, torch.Tensor]:
    reader = _Reader(payload, f"section '{section}'")
    (count,) = reader.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (key_len,) = reader.unpack("<H")
        name = reader.take(key_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"section '{section}': tensor '{name}' has unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (size,) = reader.unpack("<Q")
        dtype = _DTYPES[code]
        if size != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"section '{section}': tensor '{name}' length does not match its shape {shape}")
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=False))
    if reader.pos != len(payload):
        raise CheckpointError(f"section '{section}': {len(payload) - reader.pos} trailing bytes")
    return tensors


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    sections: dict[str, bytes] = {
        "config": ckpt.config.to_json().encode("utf-8"),
        "gaussians": _encode_tensors(
            {
                "means": ckpt.gaussians.means,
                "rotations": ckpt.gaussians.rotations,
                "log_scales": ckpt.gaussians.log_scales,
                "opacity_logits": ckpt.gaussians.opacity_logits,
                "sh_coeffs": ckpt.gaussians.sh_coeffs,
            }
        ),
        "field": _encode_tensors(ckpt.field_state),
        "windows": _encode_tensors(
            {} if ckpt.windows is None else {"boundaries": torch.tensor(ckpt.windows.boundaries, dtype=torch.float64)}
        ),
        "quantizer": _encode_tensors({"q": torch.tensor(float(ckpt.q), dtype=torch.float64)}),
        "densify": _encode_tensors(ckpt.densify),
        "meta": json.dumps(ckpt.meta, sort_keys=True).encode("utf-8"),
    }
    if ckpt.optimizer is not None:
        sections["optimizer"] = _encode_tensors(ckpt.optimizer)

    out = [config.CHECKPOINT_MAGIC, struct.pack("<II", config.CHECKPOINT_VERSION, len(sections))]
    for name in SECTION_ORDER:
        if name not in sections:
            continue
        payload = sections[name]
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<Q", len(payload)) + payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(out))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(data, "header")
    if reader.take(len(config.CHECKPOINT_MAGIC)) != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"header: {path} is not a checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointError(
            f"header: checkpoint version {version} is not supported (expected {config.CHECKPOINT_VERSION})"
        )

    raw: dict[str, bytes] = {}
    for i in range(count):
        reader.what = f"section #{i}"
        (key_len,) = reader.unpack("<H")
        name = reader.take(key_len).decode("utf-8", errors="replace")
        reader.what = f"section '{name}'"
        (size,) = reader.unpack("<Q")
        payload = reader.take(size)
        (crc,) = reader.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"section '{name}': checksum mismatch")
        raw[name] = payload
    for required in ("config", "gaussians", "field", "quantizer", "meta"):
        if required not in raw:
            raise CheckpointError(f"section '{required}': missing")

    try:
        run_config = config_from_dict(json.loads(raw["config"].decode("utf-8")))
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(f"section 'config': {exc}") from exc
    try:
        meta = json.loads(raw["meta"].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"section 'meta': {exc}") from exc

    g = _decode_tensors(raw["gaussians"], "gaussians")
    try:
        gaussians = GaussianSet(
            means=g["means"],
            rotations=g["rotations"],
            log_scales=g["log_scales"],
            opacity_logits=g["opacity_logits"],
            sh_coeffs=g["sh_coeffs"],
        )
    except (KeyError, InvalidParameterError, ConfigError) as exc:
        raise CheckpointError(f"section 'gaussians': {exc}") from exc

    windows = None
    w = _decode_tensors(raw.get("windows", struct.pack("<I", 0)), "windows")
    if "boundaries" in w:
        try:
            windows = WindowSet(tuple(w["boundaries"].tolist()))
        except InvalidParameterError as exc:
            raise CheckpointError(f"section 'windows': {exc}") from exc

    quant = _decode_tensors(raw["quantizer"], "quantizer")
    if "q" not in quant:
        raise CheckpointError("section 'quantizer': missing q")

    return Checkpoint(
        config=run_config,
        gaussians=gaussians,
        field_state=_decode_tensors(raw["field"], "field"),
        windows=windows,
        q=float(quant["q"]),
        optimizer=_decode_tensors(raw["optimizer"], "optimizer") if "optimizer" in raw else None,
        densify=_decode_tensors(raw.get("densify", struct.pack("<I", 0)), "densify"),
        meta=meta,
    )
