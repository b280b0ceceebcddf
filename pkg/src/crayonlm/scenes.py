"""In-memory and on-disk collections of synthetic scenes and their records."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import InstructionRecord, RecordKind, read_records, records_for_scene, write_records
from .errors import ArtifactError
from .panoptic import PanopticGrid, SceneConfig, downsample, load_grid, save_grid, synth_scene
from .seeding import derive_seed

RECORD_FILES = {
    "cpt": "cpt.jsonl",
    "cit_image": "cit_image.jsonl",
    "cit_vl": "cit_vl.jsonl",
}


@dataclass
class SceneSet:
    """Images and full-resolution grids keyed by id, plus named record lists."""

    images: dict[str, np.ndarray] = field(default_factory=dict)
    grids: dict[str, PanopticGrid] = field(default_factory=dict)
    records: dict[str, list[InstructionRecord]] = field(default_factory=dict)
    _small: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    def prompt_grid(self, gid: str, h: int, w: int) -> PanopticGrid:
        key = (gid, h, w)
        g = self._small.get(key)
        if g is None:
            g = self._small[key] = downsample(self.grids[gid], h, w)
        return g

    def batch_arrays(self, records, h: int, w: int):
        """Stacked images, class maps and number maps for ``records``."""
        try:
            imgs = np.stack([self.images[r.image] for r in records])
            small = [self.prompt_grid(r.grid, h, w) for r in records]
        except KeyError as exc:
            raise ArtifactError(f"record refers to missing scene {exc}") from exc
        return (imgs, np.stack([g.class_ids for g in small]), np.stack([g.numbers for g in small]))

    def merged(self, other: "SceneSet") -> "SceneSet":
        out = SceneSet({**self.images, **other.images}, {**self.grids, **other.grids})
        for key in set(self.records) | set(other.records):
            out.records[key] = self.records.get(key, []) + other.records.get(key, [])
        return out


def synth_split(root_seed: int, split: str, n_images: int, cfg: SceneConfig,
                negative_pool=None) -> SceneSet:
    """Generate ``n_images`` scenes with ids ``{split}-NNNNN`` and all their records."""
    negative_pool = tuple(cfg.thing_pool if negative_pool is None else negative_pool)
    out = SceneSet()
    cpt, cit_image, cit_vl = [], [], []
    for i in range(n_images):
        sid = f"{split}-{i:05d}"
        seed = derive_seed(root_seed, sid)
        scene = synth_scene(seed, cfg)
        out.images[sid] = scene.image
        out.grids[sid] = scene.grid
        crayon, vl = records_for_scene(scene.grid, sid, sid, seed, negative_pool)
        if crayon.kind == RecordKind.CRAYON_CPT.value:
            cpt.append(crayon)
            cit_image.append(InstructionRecord(RecordKind.IMAGE_CIT.value, sid, sid,
                                               crayon.question, crayon.answer, crayon.task))
        else:
            cit_image.append(crayon)
        cit_vl.extend(vl)
    out.records = {"cpt": cpt, "cit_image": cit_image, "cit_vl": cit_vl}
    return out


def save_split(scenes: SceneSet, root, split: str) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    (root / split).mkdir(parents=True, exist_ok=True)
    for sid in sorted(scenes.images):
        with open(root / "images" / f"{sid}.npy", "wb") as fh:
            np.save(fh, scenes.images[sid], allow_pickle=False)
        save_grid(scenes.grids[sid], root / "grids" / f"{sid}.pgrid")
    for key, fname in RECORD_FILES.items():
        write_records(scenes.records.get(key, []), root / split / fname)


def load_split(root, split: str) -> SceneSet:
    root = Path(root)
    if not (root / split).is_dir():
        raise ArtifactError(f"dataset split {split!r} not found under {root}")
    out = SceneSet()
    for key, fname in RECORD_FILES.items():
        out.records[key] = read_records(root / split / fname)
    ids = sorted({r.image for recs in out.records.values() for r in recs})
    for sid in ids:
        try:
            out.images[sid] = np.load(root / "images" / f"{sid}.npy", allow_pickle=False)
            out.grids[sid] = load_grid(root / "grids" / f"{sid}.pgrid")
        except OSError as exc:
            raise ArtifactError(f"missing scene files for {sid}: {exc}") from exc
    return out
