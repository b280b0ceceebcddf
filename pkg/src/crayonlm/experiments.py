"""Desk-scale ablation suite: one warmed-up quantized base per seed, then
CPT + CIT per prompt/adapter configuration, scored on held-out scenes."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import no_grad
from .evalkit import LMAnswerer, accuracy, probe_b2c, probe_c2b, probe_count
from .model import ModelConfig, MultimodalLM
from .panoptic import SceneConfig
from .panoptic.vocab import STUFF_IDS, THING_IDS
from .scenes import SceneSet, synth_split
from .seeding import derive_seed, rng_for
from .train import TrainConfig, WarmupConfig, collate, pretrain_base, run_cit, run_cpt

log = logging.getLogger(__name__)

DESK_THINGS = tuple(THING_IDS[:16])
DESK_STUFF = tuple(STUFF_IDS[:4])


def desk_scene_config(**kw) -> SceneConfig:
    base = dict(height=16, width=16, min_objects=1, max_objects=3, max_size=2, thing_pool=DESK_THINGS,
                background_pool=DESK_STUFF, p_unk_image=0.05)
    return SceneConfig(**{**base, **kw})


def desk_model_config(**kw) -> ModelConfig:
    base = dict(grid_h=4, grid_w=4, image_h=16, image_w=16, lora_rank=8, lora_alpha=8.0, max_seq_len=160)
    return ModelConfig(**{**base, **kw})


@dataclass(frozen=True)
class SuiteConfig:
    n_train: int = 500
    n_eval: int = 100
    scene: SceneConfig = field(default_factory=desk_scene_config)
    model: ModelConfig = field(default_factory=desk_model_config)
    warmup: WarmupConfig = field(default_factory=lambda: WarmupConfig(lm_steps=8000, lm_lr=1e-3, batch_size=16))
    cpt: TrainConfig = field(default_factory=lambda: TrainConfig.cpt(lr_max=3e-3, lr_min=3e-5, epochs=4))
    cit: TrainConfig = field(default_factory=lambda: TrainConfig.cit(lr_max=3e-3, lr_min=3e-5, epochs=6))


@dataclass
class SuiteBase:
    seed: int
    model: MultimodalLM
    train: SceneSet
    eval: SceneSet


def build_base(seed: int, suite: SuiteConfig) -> SuiteBase:
    train = synth_split(seed, "train", suite.n_train, suite.scene)
    ev = synth_split(seed, "eval", suite.n_eval, suite.scene)
    model = MultimodalLM(suite.model, rng_for(seed, "model-init"))
    pretrain_base(model, train, replace(suite.warmup, seed=derive_seed(seed, "warmup")))
    return SuiteBase(seed, model, train, ev)


def answer_token_accuracy(model: MultimodalLM, records, scenes: SceneSet, batch_size: int = 16) -> float:
    """Teacher-forced fraction of answer tokens (and <stop>) predicted exactly."""
    cfg = model.config
    hit = tot = 0
    for s in range(0, len(records), batch_size):
        chunk = records[s:s + batch_size]
        ids, targets, mask = collate(chunk, model)
        imgs, cls, num = scenes.batch_arrays(chunk, cfg.grid_h, cfg.grid_w)
        with no_grad():
            logits = model(ids, imgs, cls, num).data
        pred = logits.argmax(-1)
        hit += int(np.sum((pred == targets) & mask))
        tot += int(mask.sum())
    return hit / tot


def evaluate(model: MultimodalLM, scenes: SceneSet, classes=DESK_THINGS, seed: int = 0) -> dict[str, float]:
    ans = LMAnswerer(model)
    out = {
        "existence": accuracy(probe_c2b(ans, scenes, classes, seed)),
        "box_class": accuracy(probe_b2c(ans, scenes, classes)),
        "count": accuracy(probe_count(ans, scenes, classes)),
    }
    out["vl_mean"] = float(np.mean([out["existence"], out["box_class"], out["count"]]))
    out["image_cit"] = answer_token_accuracy(model, scenes.records["cit_image"], scenes)
    out["combined"] = 0.5 * (out["vl_mean"] + out["image_cit"])
    return out


def run_config(base: SuiteBase, suite: SuiteConfig, sem: bool, num: bool, dual: bool = True,
               cpt_model: MultimodalLM | None = None) -> tuple[dict[str, float], MultimodalLM]:
    """CPT (unless ``cpt_model`` is given) then CIT from a copy of the base; returns eval metrics."""
    t0 = time.time()
    if cpt_model is None:
        model = copy.deepcopy(base.model)
        model.set_prompt_flags(sem, num)
        run_cpt(model, base.train, replace(suite.cpt, seed=base.seed, sem_query=sem, num_query=num))
        cpt_model = copy.deepcopy(model)
    else:
        model = copy.deepcopy(cpt_model)
    run_cit(model, base.train, replace(suite.cit, seed=base.seed, sem_query=sem, num_query=num, dual_qlora=dual))
    metrics = evaluate(model, base.eval, seed=base.seed)
    log.info("seed=%d sem=%s num=%s dual=%s %s (%.0fs)", base.seed, sem, num, dual, metrics, time.time() - t0)
    return metrics, cpt_model
