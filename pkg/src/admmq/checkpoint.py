"""Checkpoints (JSON manifest + raw float64 blobs) and bit-packed export.

Checkpoint directory layout::

    manifest.json
    tensors/<name>.f64     little-endian float64, row-major

Every blob's SHA-256 is recorded in the manifest and verified on load.

Packed export (all integers big-endian)::

    b"ADMQPACK" u8 version  u32 entry_count
    per entry:
      u16 name_len  name (utf-8)  u8 ndim  u32 dims[ndim]
      f64 alpha  u8 mode  u32 payload_len  payload

``mode`` is 0 (float64 payload, alpha = 0), 1 (binary: 1 bit per weight,
1 = +alpha, 0 = -alpha) or 2 (ternary: 2 bits per weight, 00 = 0,
01 = +alpha, 10 = -alpha).  Bits are packed MSB-first in row-major order
and the last byte is zero-padded.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, QuantizationError
from .nn import Model
from .quantizer import BINARY, EXCLUDED, TERNARY, QuantScheme, is_feasible

FORMAT = "admmq-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"

PACK_MAGIC = b"ADMQPACK"
PACK_VERSION = 1
MODE_FLOAT, MODE_BINARY, MODE_TERNARY = 0, 1, 2
_MODE_CODES = {BINARY: MODE_BINARY, TERNARY: MODE_TERNARY}
_MODE_NAMES = {MODE_BINARY: BINARY, MODE_TERNARY: TERNARY}


def _blob_name(name: str) -> str:
    return f"tensors/{name}.f64"


def save_checkpoint(path, model: Model, scheme: QuantScheme | None = None, config=None, metrics=None, extra=None):
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in model.parameters().items():
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        (path / _blob_name(name)).write_bytes(blob)
        tensors[name] = {
            "file": _blob_name(name),
            "shape": list(value.shape),
            "dtype": "<f8",
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": "quantized" if scheme is not None and scheme.quantized_names() else "float",
        "architecture": model.architecture(),
        "scheme": scheme.to_dict() if scheme is not None else None,
        "config": config,
        "metrics": metrics or {},
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise DataError(f"{path}: no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"{mpath}: manifest format {manifest.get('format')!r}, expected {FORMAT!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{mpath}: unsupported format_version {manifest.get('format_version')!r}")
    for key in ("architecture", "tensors"):
        if key not in manifest:
            raise DataError(f"{mpath}: manifest lacks {key!r}")
    return manifest


def load_checkpoint(path):
    """Returns ``(model, scheme_or_None, manifest)``; verifies checksums and feasibility."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        model = Model.from_architecture(manifest["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: manifest architecture is invalid ({exc})") from None
    expected = set(model.parameters())
    if set(manifest["tensors"]) != expected:
        raise DataError(f"{path}: manifest tensors {sorted(manifest['tensors'])} do not match architecture")
    for name, meta in manifest["tensors"].items():
        blob_path = path / meta["file"]
        if not blob_path.exists():
            raise DataError(f"{path}: missing blob {meta['file']} for tensor {name!r}")
        blob = blob_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise DataError(f"{path}: integrity check failed for tensor {name!r} ({meta['file']})")
        shape = tuple(meta["shape"])
        if len(blob) != 8 * int(np.prod(shape)):
            raise DataError(f"{path}: blob {meta['file']} has {len(blob)} bytes for shape {shape}")
        model.set(name, np.frombuffer(blob, dtype="<f8").reshape(shape))
    scheme = QuantScheme.from_dict(manifest["scheme"]) if manifest.get("scheme") else None
    if scheme is not None:
        for name, entry in scheme.layers.items():
            if entry.quantized and not is_feasible(model.get(name), entry.mode, entry.alpha):
                raise QuantizationError(f"{path}: tensor {name!r} is not on its {entry.mode} level set")
    return model, scheme, manifest


# ---------------------------------------------------------------------------
# packed export
# ---------------------------------------------------------------------------


def pack_binary(values, alpha) -> bytes:
    return np.packbits(np.asarray(values).ravel() == alpha).tobytes()


def unpack_binary(payload: bytes, count: int, alpha: float) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count)
    return np.where(bits == 1, alpha, -alpha)


def pack_ternary(values, alpha) -> bytes:
    v = np.asarray(values).ravel()
    codes = np.zeros(v.size, dtype=np.uint8)
    codes[v == alpha] = 0b01
    codes[v == -alpha] = 0b10
    pad = (-v.size) % 4
    codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
    packed = (codes[:, 0] << 6) | (codes[:, 1] << 4) | (codes[:, 2] << 2) | codes[:, 3]
    return packed.astype(np.uint8).tobytes()


def unpack_ternary(payload: bytes, count: int, alpha: float) -> np.ndarray:
    b = np.frombuffer(payload, dtype=np.uint8)
    codes = np.stack([(b >> 6) & 3, (b >> 4) & 3, (b >> 2) & 3, b & 3], axis=1).ravel()[:count]
    if np.any(codes == 3):
        raise DataError("ternary payload contains reserved code 11")
    out = np.zeros(count)
    out[codes == 1] = alpha
    out[codes == 2] = -alpha
    return out


def pack_model(model: Model, scheme: QuantScheme) -> bytes:
    """Serialize every parameter; quantized weights are bit-packed."""
    entries = []
    for name, value in model.parameters().items():
        entry = scheme.layers.get(name)
        if entry is not None and entry.quantized:
            if not is_feasible(value, entry.mode, entry.alpha):
                raise QuantizationError(f"cannot export {name!r}: not on its {entry.mode} level set")
            mode = _MODE_CODES[entry.mode]
            alpha = entry.alpha
            payload = pack_binary(value, alpha) if mode == MODE_BINARY else pack_ternary(value, alpha)
        else:
            mode, alpha = MODE_FLOAT, 0.0
            payload = np.ascontiguousarray(value, dtype=">f8").tobytes()
        raw = name.encode()
        entries.append(
            struct.pack(">H", len(raw))
            + raw
            + struct.pack(f">B{value.ndim}I", value.ndim, *value.shape)
            + struct.pack(">dBI", alpha, mode, len(payload))
            + payload
        )
    return PACK_MAGIC + struct.pack(">BI", PACK_VERSION, len(entries)) + b"".join(entries)


def unpack(blob: bytes) -> dict[str, dict]:
    """Inverse of :func:`pack_model`: name -> {values, mode, alpha, payload_bytes}."""
    if blob[: len(PACK_MAGIC)] != PACK_MAGIC:
        raise DataError("not a packed weight file (bad magic at byte offset 0)")
    off = len(PACK_MAGIC)
    version, count = struct.unpack_from(">BI", blob, off)
    if version != PACK_VERSION:
        raise DataError(f"unsupported packed version {version} at byte offset {off}")
    off += 5
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from(">H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from(">B", blob, off)
            off += 1
            shape = struct.unpack_from(f">{ndim}I", blob, off)
            off += 4 * ndim
            alpha, mode, plen = struct.unpack_from(">dBI", blob, off)
            off += 13
            payload = blob[off : off + plen]
            if len(payload) != plen:
                raise DataError(f"truncated payload for {name!r} at byte offset {off}")
            off += plen
            n = int(np.prod(shape))
            if mode == MODE_FLOAT:
                values = np.frombuffer(payload, dtype=">f8").astype(np.float64)
            elif mode == MODE_BINARY:
                values = unpack_binary(payload, n, alpha)
            elif mode == MODE_TERNARY:
                values = unpack_ternary(payload, n, alpha)
            else:
                raise DataError(f"unknown mode byte {mode} for {name!r}")
            out[name] = {
                "values": values.reshape(shape),
                "mode": _MODE_NAMES.get(mode, EXCLUDED),
                "alpha": alpha if mode != MODE_FLOAT else None,
                "payload_bytes": plen,
            }
    except struct.error as exc:
        raise DataError(f"truncated packed file at byte offset {off}: {exc}") from None
    return out


def restore_model(blob: bytes, architecture: dict) -> tuple[Model, QuantScheme]:
    model = Model.from_architecture(architecture)
    entries = unpack(blob)
    modes = {}
    for name in model.parameters():
        if name not in entries:
            raise DataError(f"packed file lacks tensor {name!r}")
        model.set(name, entries[name]["values"])
    for name in model.weight_names():
        e = entries[name]
        modes[name] = {"mode": e["mode"], "alpha": e["alpha"]}
    return model, QuantScheme.from_dict(modes)


def size_report(model: Model, scheme: QuantScheme, blob: bytes | None = None) -> dict:
    """Byte accounting of the packed weights against float64/float32 storage."""
    entries = unpack(blob if blob is not None else pack_model(model, scheme))
    weights = set(model.weight_names())
    w_packed = sum(e["payload_bytes"] for n, e in entries.items() if n in weights)
    w_count = sum(model.get(n).size for n in weights)
    all_packed = sum(e["payload_bytes"] for e in entries.values())
    all_count = sum(v.size for v in model.parameters().values())
    return {
        "weight_count": int(w_count),
        "weight_payload_bytes": int(w_packed),
        "weight_float64_bytes": int(8 * w_count),
        "weight_float32_bytes": int(4 * w_count),
        "weight_ratio_vs_float64": w_packed / (8 * w_count),
        "total_payload_bytes": int(all_packed),
        "total_float64_bytes": int(8 * all_count),
        "total_ratio_vs_float64": all_packed / (8 * all_count),
        "file_bytes": len(blob) if blob is not None else None,
    }
