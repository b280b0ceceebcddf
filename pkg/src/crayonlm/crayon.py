"""Crayon prompt: codebook lookup of semantic and numbering queries, the MLP
connector, and additive injection into image-token rows.
"""

from __future__ import annotations

import numpy as np

from .core import Module, Tensor, add_rows, embedding, gelu, linear
from .core.module import normal_param, zeros_param
from .errors import ShapeError
from .panoptic.vocab import NUM_CLASSES, NUM_NUMBERS

CODEBOOK_INIT_STD = 0.02


class CrayonCodebooks(Module):
    """Learnable semantic (134 x d) and numbering (21 x d) query tables."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.semantic = normal_param(rng, (NUM_CLASSES, width), CODEBOOK_INIT_STD)
        self.numbering = normal_param(rng, (NUM_NUMBERS, width), CODEBOOK_INIT_STD)

    @property
    def width(self) -> int:
        return self.semantic.shape[1]


class Connector(Module):
    """affine -> GELU -> affine; the output layer starts at zero."""

    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator):
        self.fc1_weight = normal_param(rng, (out_width, in_width), 1.0 / np.sqrt(in_width))
        self.fc1_bias = zeros_param((out_width,))
        self.fc2_weight = zeros_param((out_width, out_width))
        self.fc2_bias = zeros_param((out_width,))

    @property
    def in_width(self) -> int:
        return self.fc1_weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"connector expects width {self.in_width}, got {x.shape[-1]}")
        return linear(gelu(linear(x, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)


def build_prompt(class_ids, numbers, cb: CrayonCodebooks, use_semantic: bool = True,
                 use_numbering: bool = True) -> Tensor:
    """Per-cell ``S[class] + N[number]`` for grids of shape (..., h, w).

    Returns a tensor of shape (..., h, w, d). Either term can be switched off
    for ablations; with both off the result is all zeros.
    """
    class_ids = np.asarray(class_ids)
    numbers = np.asarray(numbers)
    if class_ids.shape != numbers.shape:
        raise ShapeError("class and number maps differ in shape")
    for ids, n, label in ((class_ids, NUM_CLASSES, "class"), (numbers, NUM_NUMBERS, "number")):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"{label} id out of codebook range [0, {n})")
    ids_c = class_ids.astype(np.int64)
    ids_n = numbers.astype(np.int64)
    parts = []
    if use_semantic:
        parts.append(embedding(cb.semantic, ids_c))
    if use_numbering:
        parts.append(embedding(cb.numbering, ids_n))
    if not parts:
        return Tensor(np.zeros(class_ids.shape + (cb.width,), dtype=cb.semantic.dtype))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def connect(prompt: Tensor, conn: Connector) -> Tensor:
    """Apply the connector per cell and flatten (..., h, w, d) to (..., h*w, d_model), row-major."""
    if prompt.ndim < 3:
        raise ShapeError(f"prompt must be (..., h, w, d), got {prompt.shape}")
    *lead, h, w, d = prompt.shape
    return conn(prompt.reshape(*lead, h * w, d))


def inject(tokens: Tensor, connected: Tensor, start: int = 0) -> Tensor:
    """Add ``connected`` onto the image rows of ``tokens`` beginning at ``start``.

    Rows outside the image span are passed through bit-for-bit.
    """
    if tokens.ndim != connected.ndim:
        raise ShapeError(f"rank mismatch {tokens.shape} vs {connected.shape}")
    return add_rows(tokens, connected, start)
