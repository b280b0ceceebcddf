"""Binary checkpoint: ``CRYN`` magic, version, JSON manifest, raw payloads.

Layout::

    b"CRYN" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

Dense tensors are little-endian float32 (or float64 when the model was cast).
Each NF4 weight stores its packed nibbles, 8-bit absmax codes and the
per-group float32 scale/offset as separate payload sections. All offsets are
relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactError
from .model import ModelConfig, MultimodalLM
from .qlora import QuantizedLinear

MAGIC = b"CRYN"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.uint8): "u8"}
_QFIELDS = ("packed", "absmax_codes", "group_scale", "group_offset")


@dataclass
class CheckpointContents:
    manifest: dict
    tensors: dict[str, np.ndarray]
    quantized: dict[str, QuantizedLinear]


class _Payload:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray) -> dict:
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise ArtifactError(f"unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entry = {"shape": list(arr.shape), "dtype": tag, "offset": self.size, "nbytes": len(raw)}
        self.chunks.append(raw)
        self.size += len(raw)
        return entry


def dumps_checkpoint(model: MultimodalLM, meta: dict | None = None) -> bytes:
    payload = _Payload()
    tensors = []
    for name, p in model.named_parameters():
        tensors.append({"name": name, **payload.add(p.data)})
    quantized = []
    for name, lin in model.base_linears():
        q = lin.quantized
        if q is None:
            continue
        quantized.append({
            "name": name, "shape": list(q.shape), "block_size": q.block_size, "group_size": q.group_size,
            "n_blocks": q.n_blocks, "sections": {f: payload.add(getattr(q, f)) for f in _QFIELDS},
            "stats": lin.quant_stats,
        })
    router = model.router
    manifest = {
        "config": model.config.to_dict(),
        "prompt_flags": list(model.prompt_flags),
        "adapters": None if router is None else {"dual": router.dual},
        "tensors": tensors,
        "quantized": quantized,
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(payload.chunks)


def save_checkpoint(model: MultimodalLM, path, meta: dict | None = None) -> None:
    data = dumps_checkpoint(model, meta)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ArtifactError(f"cannot write checkpoint {path}: {exc}") from exc


def _section(payload: memoryview, entry: dict) -> np.ndarray:
    try:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        off, nbytes, shape = int(entry["offset"]), int(entry["nbytes"]), tuple(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"malformed manifest entry {entry!r}") from exc
    if off < 0 or off + nbytes > len(payload) or nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise ArtifactError(f"tensor section out of bounds: {entry.get('name', '?')}")
    arr = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def loads_checkpoint(data: bytes) -> CheckpointContents:
    if len(data) < _HEADER.size:
        raise ArtifactError("checkpoint truncated")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise ArtifactError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if start > len(data):
        raise ArtifactError("checkpoint manifest truncated")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(data)[start:]
    tensors = {e["name"]: _section(payload, e) for e in manifest.get("tensors", [])}
    quantized = {}
    for e in manifest.get("quantized", []):
        parts = {f: _section(payload, e["sections"][f]) for f in _QFIELDS}
        quantized[e["name"]] = QuantizedLinear(shape=tuple(e["shape"]), block_size=int(e["block_size"]),
                                               group_size=int(e["group_size"]), **parts)
    return CheckpointContents(manifest, tensors, quantized)


def read_checkpoint(path) -> CheckpointContents:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(data)


def model_from_contents(c: CheckpointContents) -> MultimodalLM:
    """Rebuild a model; every parameter the architecture expects must be present."""
    m = c.manifest
    try:
        cfg = ModelConfig(**m["config"])
        sem, num = m["prompt_flags"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"checkpoint config unusable: {exc}") from exc
    model = MultimodalLM(cfg, np.random.default_rng(0), use_semantic=sem, use_numbering=num)
    stats = {e["name"]: e.get("stats") for e in m.get("quantized", [])}
    for name, lin in model.base_linears():
        if name in c.quantized:
            lin.set_quantized(c.quantized[name], stats.get(name))
    if m.get("adapters") is not None:
        model.attach_adapters(bool(m["adapters"]["dual"]), np.random.default_rng(0))
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(c.tensors))
    if missing:
        raise ArtifactError(f"checkpoint is missing tensor(s): {', '.join(missing[:5])}")
    extra = sorted(set(c.tensors) - set(expected))
    if extra:
        raise ArtifactError(f"checkpoint has unexpected tensor(s): {', '.join(extra[:5])}")
    for name, p in expected.items():
        arr = c.tensors[name]
        if arr.shape != p.data.shape:
            raise ArtifactError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr
    model.requires_grad_(False)
    return model


def load_checkpoint(path) -> MultimodalLM:
    return model_from_contents(read_checkpoint(path))


def checkpoint_meta(path) -> dict:
    return read_checkpoint(path).manifest.get("meta", {})
