"""Instruction records: crayon instructions, no-object records, and synthetic
VL question answering, plus the Image-CIT / VL-CIT sampling stream.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArtifactError, ConfigError
from .model.tokenizer import IMAGE, STOP, Tokenizer
from .panoptic import ObjectEntry, PanopticGrid, extract_objects
from .panoptic.vocab import UNK_ID, class_name, is_thing

CPT_QUESTION = ("Provide multiple object names with their numbering index and the objects' "
                "bounding box coordinates in this image.")
NO_OBJECT_PHRASE = "None of detailed object information for image."
ANSWER_PREFIX = "Sure, it is "
C2B_TEMPLATE = "Is there any {} in this image?"
B2C_TEMPLATE = "Which object is in the specified bounding box [{}]?"
COUNT_TEMPLATE = "How many {} are in this image?"
VL_TASKS = ("count", "existence", "box_class")


class RecordKind(str, enum.Enum):
    CRAYON_CPT = "CrayonCPT"
    IMAGE_CIT = "ImageCIT"
    VL_CIT = "VLCIT"


@dataclass(frozen=True)
class InstructionRecord:
    kind: str
    image: str
    grid: str
    question: str
    answer: str
    task: str = "crayon"
    subject: str = ""  # class the question is about, when there is one

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "InstructionRecord":
        return cls(**json.loads(line))


def format_bbox(bbox: Sequence[float]) -> str:
    return ", ".join(f"{v:.2f}" for v in bbox)


def make_crayon_instruction(objects: Sequence[ObjectEntry], image: str = "", grid: str = "",
                            kind: RecordKind = RecordKind.CRAYON_CPT) -> InstructionRecord:
    if not objects:
        raise ValueError("crayon instruction needs at least one object")
    answer = ANSWER_PREFIX + ", ".join(e.render() for e in objects)
    return InstructionRecord(RecordKind(kind).value, image, grid, CPT_QUESTION, answer)


def make_no_object_record(grid_obj: PanopticGrid, image: str = "", grid: str = "") -> InstructionRecord:
    """Image-CIT record for an image with nothing recognizable (all-unk grid)."""
    if np.any(grid_obj.class_ids != UNK_ID):
        raise ValueError("no-object record requires an all-unk grid")
    answer = ANSWER_PREFIX + ", ".join(e.render() for e in extract_objects(grid_obj))
    return InstructionRecord(RecordKind.IMAGE_CIT.value, image, grid,
                             f"{NO_OBJECT_PHRASE} {CPT_QUESTION}", answer, task="no_object")


def parse_crayon_answer(answer: str) -> list[ObjectEntry]:
    from .panoptic import parse_entries
    if not answer.startswith(ANSWER_PREFIX):
        return []
    return parse_entries(answer[len(ANSWER_PREFIX):])


def make_vl_record(grid_obj: PanopticGrid, task: str, seed: int, image: str = "", grid: str = "",
                   negative_pool: Sequence[int] = (), positive: bool | None = None) -> InstructionRecord:
    """One synthetic VL question over the scene, answered from the grid."""
    if task not in VL_TASKS:
        raise ValueError(f"unknown VL task {task!r}")
    rng = np.random.default_rng(seed)
    present = [c for c in grid_obj.present_classes() if c != UNK_ID]
    things = [c for c in present if is_thing(c)]
    kind = RecordKind.VL_CIT.value

    if task == "count":
        cands = things or present
        if not cands:
            raise ValueError("count question needs a recognizable class")
        cid = int(rng.choice(cands))
        return InstructionRecord(kind, image, grid, COUNT_TEMPLATE.format(class_name(cid)),
                                 str(grid_obj.instance_count(cid)), "count", class_name(cid))

    if task == "existence":
        absent = [c for c in negative_pool if c not in present]
        if positive is None:
            positive = bool(rng.random() < 0.5)
        if positive and not present:
            positive = False
        if not positive and not absent:
            raise ValueError("no absent class available for a negative question")
        cid = int(rng.choice(things or present)) if positive else int(rng.choice(absent))
        return InstructionRecord(kind, image, grid, C2B_TEMPLATE.format(class_name(cid)),
                                 "Yes" if positive else "No", "existence", class_name(cid))

    entries = [e for e in extract_objects(grid_obj) if e.instance_number >= 1]
    if not entries:
        raise ValueError("box question needs a recognizable object")
    thing_entries = [e for e in entries if is_thing(e.class_id)] or entries
    e = thing_entries[int(rng.integers(len(thing_entries)))]
    return InstructionRecord(kind, image, grid, B2C_TEMPLATE.format(format_bbox(e.bbox)),
                             e.class_name, "box_class", e.class_name)


# ---------------------------------------------------------------------------
# token rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderedRecord:
    ids: np.ndarray        # token ids including <image> and <stop>
    loss_mask: np.ndarray  # True on answer tokens and <stop>
    prefix_len: int        # tokens up to and including "Assistant:"


def render(record: InstructionRecord, tok: Tokenizer) -> RenderedRecord:
    if not record.answer:
        raise ValueError("record has an empty answer")
    prefix = [tok.image_id] + tok.encode(f"User: {record.question}") + tok.encode("Assistant:")
    answer = tok.encode(record.answer) + [tok.stop_id]
    ids = np.array(prefix + answer, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prefix):] = True
    return RenderedRecord(ids, mask, len(prefix))


def render_text(record: InstructionRecord) -> str:
    return f"{IMAGE} User: {record.question} Assistant: {record.answer}{STOP}"


# ---------------------------------------------------------------------------
# CIT stream
# ---------------------------------------------------------------------------

class CitSampler:
    """Bernoulli choice between the Image-CIT and VL-CIT pools."""

    def __init__(self, seed: int, p_image: float = 0.5):
        if not 0.0 <= p_image <= 1.0:
            raise ConfigError("p_image must lie in [0, 1]")
        self.p_image = p_image
        self.rng = np.random.default_rng(seed)

    def draw_kind(self) -> RecordKind:
        return RecordKind.IMAGE_CIT if self.rng.random() < self.p_image else RecordKind.VL_CIT

    def draw_batch(self, pool: Sequence, size: int) -> list:
        if not pool:
            raise ConfigError("cannot draw from an empty record pool")
        idx = self.rng.integers(0, len(pool), size)
        return [pool[int(i)] for i in idx]


def sample_cit(sampler: CitSampler, pools: dict) -> InstructionRecord:
    """Pick a pool by Bernoulli(p_image), then a uniform record from it."""
    for kind in (RecordKind.IMAGE_CIT, RecordKind.VL_CIT):
        if not pools.get(kind) and not pools.get(kind.value):
            raise ConfigError(f"{kind.value} pool is empty")
    kind = sampler.draw_kind()
    pool = pools.get(kind) or pools.get(kind.value)
    return sampler.draw_batch(pool, 1)[0]


# ---------------------------------------------------------------------------
# building and storing datasets
# ---------------------------------------------------------------------------

def records_for_scene(grid_obj: PanopticGrid, image: str, grid: str, seed: int,
                      negative_pool: Sequence[int], cpt_kind: RecordKind = RecordKind.CRAYON_CPT):
    """(crayon-or-no-object record, list of VL records) for one scene."""
    if np.all(grid_obj.class_ids == UNK_ID):
        crayon = make_no_object_record(grid_obj, image, grid)
        vl = [make_vl_record(grid_obj, "existence", seed, image, grid, negative_pool, positive=False)]
        return crayon, vl
    crayon = make_crayon_instruction(extract_objects(grid_obj), image, grid, cpt_kind)
    vl = [
        make_vl_record(grid_obj, "existence", seed, image, grid, negative_pool, positive=True),
        make_vl_record(grid_obj, "existence", seed + 1, image, grid, negative_pool, positive=False),
        make_vl_record(grid_obj, "count", seed + 2, image, grid, negative_pool),
        make_vl_record(grid_obj, "box_class", seed + 3, image, grid, negative_pool),
    ]
    return crayon, vl


def write_records(records: Iterable[InstructionRecord], path) -> None:
    text = "".join(r.to_json() + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def read_records(path) -> list[InstructionRecord]:
    out = []
    try:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                out.append(InstructionRecord.from_json(line))
    except (OSError, ValueError, TypeError) as exc:
        raise ArtifactError(f"cannot read records from {path}: {exc}") from exc
    return out
