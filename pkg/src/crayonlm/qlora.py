"""NF4 block quantization with double-quantized absmax, LoRA adapters, and
the two-adapter router used during instruction tuning.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from .core import Module, Tensor, linear
from .core.module import zeros_param
from .errors import ArgumentError, ShapeError

BLOCK_SIZE = 64
GROUP_SIZE = 256
# Midpoint of 1 - 1/(2*15) and 1 - 1/(2*16): keeps the outermost quantile finite.
NF4_OFFSET = 0.9677083


@lru_cache(maxsize=1)
def _nf4_values() -> tuple[float, ...]:
    nd = NormalDist()
    pos = [nd.inv_cdf(p) for p in np.linspace(NF4_OFFSET, 0.5, 9)[:-1]]
    neg = [-nd.inv_cdf(p) for p in np.linspace(NF4_OFFSET, 0.5, 8)[:-1]]
    vals = sorted(pos + [0.0] + neg)
    top = max(vals)
    return tuple(v / top for v in vals)


def nf4_codebook() -> np.ndarray:
    """The 16 NF4 levels in ascending order, as float32 (read-only)."""
    arr = np.array(_nf4_values(), dtype=np.float32)
    arr.setflags(write=False)
    return arr


def max_code_gap() -> float:
    return float(np.max(np.diff(nf4_codebook().astype(np.float64))))


def nearest_code(u: np.ndarray) -> np.ndarray:
    """Index of the closest NF4 level; exact ties go to the lower index."""
    code = nf4_codebook().astype(np.float64)
    dist = np.abs(np.asarray(u, dtype=np.float64)[..., None] - code)
    return np.argmin(dist, axis=-1).astype(np.uint8)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two 4-bit codes per byte; the even-index element sits in the low nibble."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


@dataclass(frozen=True, eq=False)
class QuantizedLinear:
    """NF4 weight with per-64 block absmax, itself 8-bit affine coded per 256 group."""

    packed: np.ndarray          # uint8, ceil(padded/2)
    absmax_codes: np.ndarray    # uint8, one per block
    group_scale: np.ndarray     # float32, one per group
    group_offset: np.ndarray    # float32, one per group
    shape: tuple[int, ...]
    block_size: int = BLOCK_SIZE
    group_size: int = GROUP_SIZE
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.numel / self.block_size)

    @property
    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.n_blocks * self.block_size)

    def absmax(self) -> np.ndarray:
        """Reconstructed per-block absmax (float32)."""
        g = np.arange(self.n_blocks) // self.group_size
        return (self.group_offset[g] + self.absmax_codes.astype(np.float32) * self.group_scale[g]).astype(np.float32)

    def dequantize(self) -> np.ndarray:
        cached = self._cache.get("w")
        if cached is None:
            levels = nf4_codebook()[self.codes].reshape(self.n_blocks, self.block_size)
            w = (levels * self.absmax()[:, None]).reshape(-1)[:self.numel].reshape(self.shape)
            w = w.astype(np.float32)
            w.setflags(write=False)
            self._cache["w"] = cached = w
        return cached

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedLinear):
            return NotImplemented
        return (self.shape == other.shape and self.block_size == other.block_size
                and self.group_size == other.group_size
                and np.array_equal(self.packed, other.packed)
                and np.array_equal(self.absmax_codes, other.absmax_codes)
                and np.array_equal(self.group_scale, other.group_scale)
                and np.array_equal(self.group_offset, other.group_offset))

    def content_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in
                        (self.packed, self.absmax_codes, self.group_scale, self.group_offset))


def quantize_absmax(absmax: np.ndarray, group_size: int = GROUP_SIZE):
    """8-bit affine codes per group: ``value ~= offset + code * scale``."""
    absmax = np.asarray(absmax, dtype=np.float32)
    n_groups = math.ceil(absmax.size / group_size)
    codes = np.zeros(absmax.size, dtype=np.uint8)
    scales = np.zeros(n_groups, dtype=np.float32)
    offsets = np.zeros(n_groups, dtype=np.float32)
    for gi in range(n_groups):
        a = absmax[gi * group_size:(gi + 1) * group_size]
        lo, hi = np.float32(a.min()), np.float32(a.max())
        scale = np.float32((hi - lo) / np.float32(255))
        offsets[gi], scales[gi] = lo, scale
        if scale > 0:
            q = np.rint((a.astype(np.float64) - float(lo)) / float(scale))
            codes[gi * group_size:gi * group_size + a.size] = np.clip(q, 0, 255).astype(np.uint8)
    return codes, scales, offsets


def quantize(weights, block_size: int = BLOCK_SIZE, group_size: int = GROUP_SIZE) -> QuantizedLinear:
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise ArgumentError("cannot quantize non-finite weights")
    flat = w.reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1)
    safe = np.where(absmax > 0, absmax, 1.0).astype(np.float64)
    normalized = blocks.astype(np.float64) / safe[:, None]
    codes = nearest_code(normalized).reshape(-1)
    a_codes, scales, offsets = quantize_absmax(absmax, group_size)
    return QuantizedLinear(pack_nibbles(codes), a_codes, scales, offsets, tuple(w.shape),
                           block_size, group_size)


def dequantize(q: QuantizedLinear) -> np.ndarray:
    return q.dequantize()


def block_absmax(weights, block_size: int = BLOCK_SIZE) -> np.ndarray:
    flat = np.asarray(weights, dtype=np.float32).reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:flat.size] = flat
    return np.abs(padded.reshape(n_blocks, block_size)).max(axis=1)


def error_bound(weights, q: QuantizedLinear) -> np.ndarray:
    """Per-block bound on |dequantized - original|: half the widest code gap
    at the reconstructed scale, plus the absmax reconstruction error."""
    a = block_absmax(weights, q.block_size).astype(np.float64)
    a_hat = q.absmax().astype(np.float64)
    return a_hat * max_code_gap() / 2 + np.abs(a_hat - a)


def quantization_stats(weights, q: QuantizedLinear) -> dict:
    w = np.asarray(weights, dtype=np.float32)
    err = np.abs(q.dequantize().astype(np.float64) - w.astype(np.float64))
    return {"max_error": float(err.max()) if err.size else 0.0,
            "bound": float(error_bound(w, q).max()) if err.size else 0.0}


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

class LoRAAdapter(Module):
    """Low-rank update ``(alpha / r) * B @ A`` with B starting at zero."""

    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float,
                 rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_features)
        self.A = Tensor(rng.uniform(-bound, bound, (rank, in_features)).astype(np.float32),
                        requires_grad=True)
        self.B = zeros_param((out_features, rank))
        self._rank = rank
        self._alpha = float(alpha)

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def scale(self) -> float:
        return self._alpha / self._rank


def qlora_forward(x: Tensor, base, adapters) -> Tensor:
    """``x @ W^T + sum_a (alpha/r) * (x @ A^T) @ B^T`` with W dequantized if needed."""
    w = base.dequantize() if isinstance(base, QuantizedLinear) else base
    w = w if isinstance(w, Tensor) else Tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    out = linear(x, w)
    for ad in adapters:
        out = out + linear(linear(x, ad.A), ad.B) * ad.scale
    return out


class QLoRALinear(Module):
    """Frozen (optionally NF4-quantized) projection plus named LoRA adapters."""

    def __init__(self, weight: Tensor):
        self.weight = weight
        self._quantized: QuantizedLinear | None = None
        self._quant_stats: dict | None = None
        self.adapters: dict[str, LoRAAdapter] = {}

    @property
    def quantized(self) -> QuantizedLinear | None:
        return self._quantized

    @property
    def in_features(self) -> int:
        return self.base_shape[1]

    @property
    def out_features(self) -> int:
        return self.base_shape[0]

    @property
    def base_shape(self) -> tuple[int, int]:
        return self._quantized.shape if self._quantized is not None else self.weight.shape

    @property
    def quant_stats(self) -> dict | None:
        """Error statistics recorded when the dense weight was quantized."""
        return self._quant_stats

    def quantize_(self) -> QuantizedLinear:
        """Replace the dense weight by its NF4 form; the dense tensor is dropped."""
        if self._quantized is None:
            q = quantize(self.weight)
            self._quant_stats = quantization_stats(self.weight.data, q)
            self._quantized = q
            del self.weight
        return self._quantized

    def set_quantized(self, q: QuantizedLinear, stats: dict | None = None) -> None:
        self._quantized = q
        self._quant_stats = stats
        if "weight" in vars(self):
            del self.weight

    def add_adapter(self, name: str, rank: int, alpha: float, rng: np.random.Generator) -> LoRAAdapter:
        ad = LoRAAdapter(self.in_features, self.out_features, rank, alpha, rng)
        self.adapters[name] = ad
        return ad

    def __call__(self, x: Tensor) -> Tensor:
        base = self._quantized if self._quantized is not None else self.weight
        return qlora_forward(x, base, list(self.adapters.values()))


class CITMode(str, enum.Enum):
    IMAGE = "ImageCIT"
    VL = "VLCIT"
    INFERENCE = "InferenceBoth"


class DualAdapterRouter:
    """Decides which adapter set trains.

    With ``dual=True`` each projection carries an ``image`` and a ``vl``
    adapter; ImageCIT trains only the former, VLCIT only the latter. With
    ``dual=False`` a single ``shared`` adapter trains in both modes. Every
    attached adapter always contributes to the forward pass; routing changes
    trainability only. Base weights are never trainable.
    """

    def __init__(self, layers: list[QLoRALinear], dual: bool = True):
        self.layers = layers
        self.dual = dual
        self.mode = CITMode.INFERENCE

    @property
    def adapter_names(self) -> tuple[str, ...]:
        return ("image", "vl") if self.dual else ("shared",)

    def trainable_adapter(self, mode: CITMode) -> str | None:
        mode = CITMode(mode)
        if mode is CITMode.INFERENCE:
            return None
        if not self.dual:
            return "shared"
        return "image" if mode is CITMode.IMAGE else "vl"

    def route(self, mode) -> None:
        self.mode = CITMode(mode)
        active = self.trainable_adapter(self.mode)
        for layer in self.layers:
            if "weight" in vars(layer):
                layer.weight.requires_grad = False
            for name, ad in layer.adapters.items():
                ad.requires_grad_(name == active)


def route(router: DualAdapterRouter, mode) -> None:
    router.route(mode)
