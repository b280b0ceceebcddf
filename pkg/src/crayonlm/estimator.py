"""scikit-learn style wrapper around the full training pipeline.

``fit`` takes a :class:`SceneSet` with its record pools, ``predict`` maps
instruction records to answer strings, ``score`` is exact-match accuracy
after answer normalization.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .datagen import InstructionRecord
from .errors import ArgumentError
from .evalkit import LMAnswerer, normalize_answer
from .model import MultimodalLM
from .scenes import SceneSet
from .seeding import rng_for
from .train import pretrain_base, run_cit, run_cpt

STAGES = ("pretrain", "cpt", "cit")


def check_scene_set(scenes) -> SceneSet:
    if not isinstance(scenes, SceneSet):
        raise ArgumentError(f"expected a SceneSet, got {type(scenes).__name__}")
    if not len(scenes):
        raise ArgumentError("scene set is empty")
    return scenes


def check_records(records) -> list[InstructionRecord]:
    records = list(records)
    bad = [type(r).__name__ for r in records if not isinstance(r, InstructionRecord)]
    if bad:
        raise ArgumentError(f"expected InstructionRecord items, got {bad[0]}")
    return records


class CrayonVLM(BaseEstimator):
    """Warm-up, CPT and CIT in one ``fit``; greedy answers in ``predict``.

    Parameters
    ----------
    config : RunConfig or None
        Every model, data and training knob. ``None`` means ``RunConfig()``.
    stages : tuple of str
        Which of ``pretrain``, ``cpt``, ``cit`` to run, in that order.
    base : MultimodalLM or None
        Start from this quantized base instead of running the warm-up. It is
        copied, never mutated.
    max_new_tokens : int
        Decoding budget for ``predict``.
    """

    def __init__(self, config: RunConfig | None = None, stages: Sequence[str] = STAGES,
                 base: MultimodalLM | None = None, max_new_tokens: int = 3):
        self.config = config
        self.stages = stages
        self.base = base
        self.max_new_tokens = max_new_tokens

    def _cfg(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig()

    def fit(self, X: SceneSet, y=None):
        scenes = check_scene_set(X)
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ArgumentError(f"unknown stage(s): {sorted(unknown)}")
        cfg = self._cfg()
        if self.base is not None:
            model = copy.deepcopy(self.base)
        else:
            model = MultimodalLM(cfg.model_config(), rng_for(cfg.seed, "model-init"))
        self.history_ = {}
        if "pretrain" in self.stages and self.base is None:
            self.history_["pretrain"] = pretrain_base(model, scenes, cfg.warmup_config())
        if "cpt" in self.stages:
            self.history_["cpt"] = run_cpt(model, scenes, cfg.cpt_config())
        if "cit" in self.stages:
            self.history_["cit"] = run_cit(model, scenes, cfg.cit_config())
        self.model_ = model
        self.scenes_ = scenes
        return self

    def predict(self, X, scenes: SceneSet | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        records = check_records(X)
        pool = self.scenes_ if scenes is None else check_scene_set(scenes)
        answers = LMAnswerer(self.model_, self.max_new_tokens).answer(records, pool)
        return np.array(answers, dtype=object)

    def score(self, X, y=None, scenes: SceneSet | None = None) -> float:
        records = check_records(X)
        if y is None:
            y = [r.answer for r in records]
        if len(y) != len(records):
            raise ArgumentError("X and y differ in length")
        if not records:
            raise ArgumentError("cannot score an empty record list")
        pred = self.predict(records, scenes)
        return float(np.mean([normalize_answer(p) == normalize_answer(t) for p, t in zip(pred, y)]))
