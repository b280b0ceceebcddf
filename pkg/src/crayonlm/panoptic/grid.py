"""Panoptic grids: per-cell (class, instance number) maps and what we derive from them."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from fractions import Fraction
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, ArtifactError, ShapeError
from .vocab import MAX_INSTANCES, NUM_CLASSES, UNK_ID, class_id, class_name


@dataclass(frozen=True, eq=False)
class PanopticGrid:
    class_ids: np.ndarray
    numbers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.class_ids, dtype=np.int32)
        n = np.asarray(self.numbers, dtype=np.int32)
        if c.ndim != 2 or c.shape != n.shape:
            raise ShapeError(f"class/number maps must be equal 2-D arrays, got {c.shape} {n.shape}")
        if c.size == 0:
            raise ShapeError("empty grid")
        if c.min() < 0 or c.max() >= NUM_CLASSES:
            raise ValueError("class id out of range")
        unk = c == UNK_ID
        if np.any(n[unk] != 0):
            raise ValueError("unk cells must carry number 0")
        if np.any((n[~unk] < 1) | (n[~unk] > MAX_INSTANCES)):
            raise ValueError(f"non-unk cells need numbers in [1, {MAX_INSTANCES}]")
        c.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "class_ids", c)
        object.__setattr__(self, "numbers", n)

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_ids.shape

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanopticGrid):
            return NotImplemented
        return (np.array_equal(self.class_ids, other.class_ids)
                and np.array_equal(self.numbers, other.numbers))

    def present_classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.class_ids))

    def instance_count(self, cid: int) -> int:
        """Number of distinct instance numbers carried by class ``cid``."""
        return len(np.unique(self.numbers[self.class_ids == cid]))

    @classmethod
    def full(cls, height: int, width: int, cid: int) -> "PanopticGrid":
        num = 0 if cid == UNK_ID else 1
        return cls(np.full((height, width), cid), np.full((height, width), num))


def assign_numbering(class_ids, instance_ids) -> PanopticGrid:
    """Renumber raw instance labels to 1, 2, ... per class in raster-scan order.

    ``instance_ids`` may use any distinct labels within a class. Unk cells get
    0. A class with more than 20 instances has the overflow clamped to 20.
    """
    c = np.asarray(class_ids)
    raw = np.asarray(instance_ids)
    if c.shape != raw.shape:
        raise ShapeError("class and instance maps differ in shape")
    out = np.zeros(c.shape, dtype=np.int32)
    seen: dict[tuple[int, int], int] = {}
    next_num: dict[int, int] = {}
    overflow = set()
    flat_c, flat_r, flat_o = c.reshape(-1), raw.reshape(-1), out.reshape(-1)
    for i in range(flat_c.size):
        cid = int(flat_c[i])
        if cid == UNK_ID:
            continue
        key = (cid, int(flat_r[i]))
        num = seen.get(key)
        if num is None:
            num = next_num.get(cid, 0) + 1
            next_num[cid] = num
            if num > MAX_INSTANCES:
                overflow.add(cid)
                num = MAX_INSTANCES
            seen[key] = num
        flat_o[i] = num
    if overflow:
        names = ", ".join(class_name(k) for k in sorted(overflow))
        warnings.warn(f"more than {MAX_INSTANCES} instances for {names}; clamped", stacklevel=2)
    return PanopticGrid(c, out)


def _edges(total: int, parts: int) -> list[int]:
    return [(i * total) // parts for i in range(parts + 1)]


def downsample(grid: PanopticGrid, h: int, w: int) -> PanopticGrid:
    """Majority vote of (class, number) pairs over each source block.

    Ties go to the smallest class id, then the smallest number.
    """
    if h <= 0 or w <= 0:
        raise ArgumentError("target size must be positive")
    H, W = grid.shape
    if h > H or w > W:
        raise ArgumentError(f"cannot downsample {H}x{W} to larger {h}x{w}")
    if (h, w) == (H, W):
        return grid
    key = grid.class_ids.astype(np.int64) * (MAX_INSTANCES + 1) + grid.numbers
    rows, cols = _edges(H, h), _edges(W, w)
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            block = key[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].reshape(-1)
            vals, counts = np.unique(block, return_counts=True)
            out[i, j] = vals[np.argmax(counts)]  # unique() sorts, argmax takes the first max
    return PanopticGrid(out // (MAX_INSTANCES + 1), out % (MAX_INSTANCES + 1))


def round2(x: Fraction) -> Fraction:
    """Round half away from zero to two decimals, exactly."""
    d = Decimal(x.numerator) / Decimal(x.denominator)
    return Fraction(d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ObjectEntry:
    class_name: str
    instance_number: int
    bbox: tuple[float, float, float, float]

    def render(self) -> str:
        coords = ", ".join(f"{v:.2f}" for v in self.bbox)
        return f"(#{self.instance_number} {self.class_name}) [{coords}]"

    @property
    def class_id(self) -> int:
        return class_id(self.class_name)


_ENTRY_RE = re.compile(
    r"\(#(\d+) ([a-z][a-z \-]*?)\) \[(\d\.\d\d), (\d\.\d\d), (\d\.\d\d), (\d\.\d\d)\]")


def parse_entries(text: str) -> list[ObjectEntry]:
    """Inverse of :meth:`ObjectEntry.render` for a comma-joined list of entries."""
    out = []
    for m in _ENTRY_RE.finditer(text):
        out.append(ObjectEntry(m.group(2), int(m.group(1)),
                               tuple(float(m.group(k)) for k in range(3, 7))))
    return out


def extract_objects(grid: PanopticGrid) -> list[ObjectEntry]:
    """One entry per (class, number) pair, unk cells pooled into a single entry.

    Boxes use exclusive max edges normalized by the grid size, rounded to two
    decimals; entries follow raster-scan first appearance.
    """
    H, W = grid.shape
    c, n = grid.class_ids, grid.numbers
    keys = (c.astype(np.int64) * (MAX_INSTANCES + 1) + n).reshape(-1)
    uniq, first = np.unique(keys, return_index=True)
    out = []
    for k in uniq[np.argsort(first)]:
        ys, xs = np.nonzero(keys.reshape(H, W) == k)
        cid, num = divmod(int(k), MAX_INSTANCES + 1)
        box = (Fraction(int(xs.min()), W), Fraction(int(ys.min()), H),
               Fraction(int(xs.max()) + 1, W), Fraction(int(ys.max()) + 1, H))
        out.append(ObjectEntry(class_name(cid), num, tuple(float(round2(v)) for v in box)))
    return out


# -- grid file format --------------------------------------------------------

def dumps_grid(grid: PanopticGrid) -> str:
    H, W = grid.shape
    lines = [f"PGRID v1 {H} {W}"]
    for r in range(H):
        lines.append(" ".join(f"{int(a)}:{int(b)}" for a, b in zip(grid.class_ids[r], grid.numbers[r])))
    lines.append("CLASSES")
    for cid in grid.present_classes():
        lines.append(f"{cid} {class_name(cid)}")
    return "\n".join(lines) + "\n"


def loads_grid(text: str) -> PanopticGrid:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        magic, ver, hs, ws = lines[0].split(" ")
        if magic != "PGRID" or ver != "v1":
            raise ValueError
        H, W = int(hs), int(ws)
        if lines[1 + H] != "CLASSES":
            raise ValueError
        table = {}
        for line in lines[2 + H:]:
            idx, name = line.split(" ", 1)
            table[int(idx)] = class_id(name)
        cls = np.zeros((H, W), dtype=np.int32)
        num = np.zeros((H, W), dtype=np.int32)
        for r in range(H):
            cells = lines[1 + r].split(" ")
            if len(cells) != W:
                raise ValueError
            for col, cell in enumerate(cells):
                a, b = cell.split(":")
                cls[r, col] = table[int(a)]
                num[r, col] = int(b)
    except (ValueError, IndexError, KeyError) as exc:
        raise ArtifactError(f"malformed grid file: {exc}") from exc
    return PanopticGrid(cls, num)


def save_grid(grid: PanopticGrid, path) -> None:
    Path(path).write_text(dumps_grid(grid), encoding="ascii", newline="\n")


def load_grid(path) -> PanopticGrid:
    return loads_grid(Path(path).read_text(encoding="ascii"))
