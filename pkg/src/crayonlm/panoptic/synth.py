"""Synthetic scenes: axis-aligned rectangles over a stuff background.

Stands in for a segmentation model. Pixels carry a fixed per-class color plus
seeded Gaussian noise, so class identity is learnable from pixels but not
perfectly separable once the noise is large.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, GenerationError
from .grid import PanopticGrid, assign_numbering
from .vocab import NUM_CLASSES, STUFF_IDS, THING_IDS, UNK_ID, is_stuff

_PALETTE_SEED = 20240229


def class_palette(channels: int = 3) -> np.ndarray:
    """Fixed (134, channels) color table in [0, 1]."""
    return np.random.default_rng(_PALETTE_SEED).uniform(0.0, 1.0, (NUM_CLASSES, channels)).astype(np.float32)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    min_objects: int = 0
    max_objects: int = 8
    thing_pool: tuple[int, ...] = THING_IDS
    background_pool: tuple[int, ...] = STUFF_IDS
    max_instances_per_class: int = 3
    snap: int = 4
    min_size: int = 1  # in snap units
    max_size: int = 3
    noise_std: float = 0.3
    p_unk_image: float = 0.0
    max_retries: int = 200

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects <= 8:
            raise ArgumentError("object count bounds must satisfy 0 <= min <= max <= 8")
        if self.height % self.snap or self.width % self.snap:
            raise ArgumentError("snap must divide the scene size")
        if not self.background_pool or any(not is_stuff(c) for c in self.background_pool):
            raise ArgumentError("background pool must be non-empty stuff classes")
        if not self.thing_pool:
            raise ArgumentError("thing pool must be non-empty")


@dataclass
class Scene:
    grid: PanopticGrid
    image: np.ndarray  # (H, W, C) float32
    background: int
    placements: list[tuple[int, tuple[int, int, int, int]]] = field(default_factory=list)

    def requested_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for cid, _ in self.placements:
            hist[cid] = hist.get(cid, 0) + 1
        return hist


def _render(class_ids: np.ndarray, rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    pal = class_palette(cfg.channels)
    noise = rng.standard_normal((cfg.height, cfg.width, cfg.channels)).astype(np.float32)
    return (pal[class_ids] + np.float32(cfg.noise_std) * noise).astype(np.float32)


def synth_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    H, W, s = cfg.height, cfg.width, cfg.snap
    if rng.random() < cfg.p_unk_image:
        cls = np.full((H, W), UNK_ID, dtype=np.int32)
        return Scene(PanopticGrid(cls, np.zeros_like(cls)), _render(cls, rng, cfg), UNK_ID)

    bg = int(rng.choice(cfg.background_pool))
    cls = np.full((H, W), bg, dtype=np.int32)
    inst = np.zeros((H, W), dtype=np.int32)
    occupied = np.zeros((H // s, W // s), dtype=bool)

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes: list[int] = []
    pool = list(cfg.thing_pool)
    while len(classes) < n_obj:
        cid = int(rng.choice(pool))
        k = int(rng.integers(1, cfg.max_instances_per_class + 1))
        if is_stuff(cid):
            k = 1
        k = min(k, n_obj - len(classes))
        classes.extend([cid] * k)
        pool.remove(cid)
        if not pool and len(classes) < n_obj:
            raise GenerationError("thing pool too small for requested object count")

    placements = []
    gh, gw = H // s, W // s
    for idx, cid in enumerate(classes, start=1):
        for _ in range(cfg.max_retries):
            rh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            rw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            if rh > gh or rw > gw:
                continue
            r0 = int(rng.integers(0, gh - rh + 1))
            c0 = int(rng.integers(0, gw - rw + 1))
            if not occupied[r0:r0 + rh, c0:c0 + rw].any():
                break
        else:
            raise GenerationError(f"could not place object {idx} after {cfg.max_retries} tries")
        occupied[r0:r0 + rh, c0:c0 + rw] = True
        y0, x0, y1, x1 = r0 * s, c0 * s, (r0 + rh) * s, (c0 + rw) * s
        cls[y0:y1, x0:x1] = cid
        inst[y0:y1, x0:x1] = idx
        placements.append((cid, (x0, y0, x1, y1)))

    grid = assign_numbering(cls, inst)
    # a background fully hidden by rectangles simply does not appear
    return Scene(grid, _render(grid.class_ids, rng, cfg), bg, placements)


def synth_generate(seed: int, cfg: SceneConfig = SceneConfig()) -> tuple[PanopticGrid, np.ndarray]:
    scene = synth_scene(seed, cfg)
    return scene.grid, scene.image
