"""Base warm-up, Crayon Prompt Tuning (CPT), and crayon-based instruction
tuning (CIT) with dual adapters.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .core import AdamW, LrSchedule, Module, Tensor, backward, cosine_lr, linear, masked_cross_entropy
from .core.module import normal_param, zeros_param
from .datagen import CitSampler, InstructionRecord, RecordKind, render
from .errors import ConfigError, FreezeViolation, TrainingAbort
from .model import MultimodalLM
from .panoptic.vocab import NUM_CLASSES
from .qlora import CITMode
from .scenes import SceneSet
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

CPT_LR = (1e-4, 1e-6)
CIT_LR = (1e-5, 1e-6)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "CPT"
    batch_size: int = 8
    epochs: int = 1
    steps: int = 0               # 0: epochs * ceil(records / batch)
    lr_max: float = CPT_LR[0]
    lr_min: float = CPT_LR[1]
    seed: int = 0
    sem_query: bool = True
    num_query: bool = True
    dual_qlora: bool = True
    p_image: float = 0.5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    audit_every: int = 50

    def __post_init__(self):
        if self.stage not in ("CPT", "CIT"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not self.lr_max > self.lr_min > 0:
            raise ConfigError("need lr_max > lr_min > 0")
        if self.batch_size <= 0 or self.epochs <= 0 or self.steps < 0 or self.audit_every <= 0:
            raise ConfigError("batch_size, epochs and audit_every must be positive")

    @classmethod
    def cpt(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "CPT", "lr_max": CPT_LR[0], "lr_min": CPT_LR[1], **kw})

    @classmethod
    def cit(cls, **kw) -> "TrainConfig":
        return cls(**{"stage": "CIT", "lr_max": CIT_LR[0], "lr_min": CIT_LR[1], **kw})

    def n_steps(self, n_records: int) -> int:
        return self.steps or self.epochs * math.ceil(n_records / self.batch_size)

    def schedule(self, n_steps: int) -> LrSchedule:
        return LrSchedule(self.lr_max, self.lr_min, max(n_steps - 1, 1))


@dataclass(frozen=True)
class WarmupConfig:
    """Pretraining of the stand-in vision encoder and backbone before they freeze."""

    vision_steps: int = 300
    vision_lr: float = 3e-3
    lm_steps: int = 600
    lm_lr: float = 3e-3
    lr_min_ratio: float = 0.01
    batch_size: int = 8
    seed: int = 0


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    mode: str

    def line(self) -> str:
        return f"{self.step} {self.lr:.6e} {self.loss:.6f} {self.mode}"


@dataclass
class RunResult:
    history: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.loss for h in self.history]

    @property
    def lrs(self) -> list[float]:
        return [h.lr for h in self.history]


# ---------------------------------------------------------------------------
# batching and loss
# ---------------------------------------------------------------------------

def collate(records: Sequence[InstructionRecord], model: MultimodalLM):
    """Pad rendered records and map their loss masks onto expanded positions.

    Returns (ids, targets, mask) where targets/mask index the logits of the
    image-expanded sequence: position p predicts the token at p + 1.
    """
    tok = model.tokenizer
    hw = model.config.n_image_tokens
    rendered = [render(r, tok) for r in records]
    T = max(len(r.ids) for r in rendered)
    B = len(rendered)
    ids = np.full((B, T), tok.pad_id, dtype=np.int64)
    L = T - 1 + hw
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, r in enumerate(rendered):
        n = len(r.ids)
        if r.ids[0] != tok.image_id:
            raise ConfigError("records must start with <image>")
        ids[b, :n] = r.ids
        j = np.arange(1, n)
        pos = j - 2 + hw
        targets[b, pos] = r.ids[1:]
        mask[b, pos] = r.loss_mask[1:]
    return ids, targets, mask


def batch_loss(model: MultimodalLM, records: Sequence[InstructionRecord], scenes: SceneSet,
               crayon_on: bool | None = None) -> Tensor:
    cfg = model.config
    ids, targets, mask = collate(records, model)
    imgs, cls, num = scenes.batch_arrays(records, cfg.grid_h, cfg.grid_w)
    logits = model(ids, imgs, cls, num, crayon_on)
    return masked_cross_entropy(logits, targets, mask)


def loss_of(record: InstructionRecord, model: MultimodalLM, scenes: SceneSet,
            crayon_on: bool | None = None) -> Tensor:
    """Teacher-forced loss on the answer tokens (and <stop>) of one record."""
    return batch_loss(model, [record], scenes, crayon_on)


# ---------------------------------------------------------------------------
# trainable sets and freeze audits
# ---------------------------------------------------------------------------

def prompt_params(model: MultimodalLM, sem: bool, num: bool) -> dict[str, Tensor]:
    out = {}
    if sem:
        out["codebooks.semantic"] = model.codebooks.semantic
    if num:
        out["codebooks.numbering"] = model.codebooks.numbering
    if sem or num:
        out.update({f"connector.{k}": v for k, v in model.connector.named_parameters()})
    return out


def adapter_params(model: MultimodalLM, name: str) -> dict[str, Tensor]:
    tag = f".adapters.{name}."
    return {k: v for k, v in model.named_parameters() if tag in k}


def freeze_all(model: MultimodalLM) -> None:
    model.requires_grad_(False)


def hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def group_of(name: str) -> str:
    """Audit group of a parameter name: adapters by adapter name, the rest by top-level module."""
    if ".adapters." in name:
        return "adapters." + name.split(".adapters.")[1].split(".")[0]
    if name.startswith("codebooks."):
        return name.rsplit(".", 1)[0] if name.count(".") > 1 else name
    return name.split(".")[0]


def group_hashes(model: MultimodalLM, exclude: set[str]) -> dict[str, str]:
    """Content hash of every parameter group outside ``exclude``, plus the quantized base."""
    groups: dict[str, list[np.ndarray]] = {}
    for name, p in model.named_parameters():
        if name not in exclude:
            groups.setdefault(group_of(name), []).append(p.data)
    out = {g: hash_arrays(arrs) for g, arrs in sorted(groups.items())}
    quant = [lin.quantized.content_bytes() for _, lin in model.base_linears() if lin.quantized is not None]
    if quant:
        out["base.quantized"] = hashlib.sha256(b"".join(quant)).hexdigest()
    return out


class FreezeAuditor:
    """Snapshots group hashes and asserts they have not moved."""

    def __init__(self, model: MultimodalLM, trainable: set[str]):
        self.model = model
        self.trainable = set(trainable)
        self.reference = group_hashes(model, self.trainable)
        self.checks = 0

    def check(self, where: str) -> None:
        now = group_hashes(self.model, self.trainable)
        for g, ref in self.reference.items():
            if now.get(g) != ref:
                raise FreezeViolation(f"frozen group {g!r} changed ({where})")
        self.checks += 1


def _no_decay(names) -> set[str]:
    # Codebook rows absent from the data must stay exactly at their initial values.
    return {n for n in names if n.startswith("codebooks.")}


def _finite_or_abort(loss: Tensor, step: int, lr: float, mode: str) -> float:
    val = float(loss.data)
    if not math.isfinite(val):
        raise TrainingAbort(f"non-finite loss {val} at step {step} (lr={lr:.3e}, mode={mode})")
    return val


def _emit(rec: StepRecord, log_fh: TextIO | None) -> None:
    if log_fh is not None:
        log_fh.write(rec.line() + "\n")
    log.debug(rec.line())


# ---------------------------------------------------------------------------
# warm-up of the stand-in pretrained components
# ---------------------------------------------------------------------------

class PatchClassifier(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.weight = normal_param(rng, (NUM_CLASSES, d_model), 0.02)
        self.bias = zeros_param((NUM_CLASSES,))


def pretrain_base(model: MultimodalLM, scenes: SceneSet, cfg: WarmupConfig = WarmupConfig(),
                  records: Sequence[InstructionRecord] | None = None) -> RunResult:
    """Train the vision encoder on per-patch classes, then the backbone as a
    plain image-conditioned LM (no crayon prompt), then quantize and freeze.
    """
    result = RunResult()
    mcfg = model.config
    ids = sorted(scenes.images)
    rng = rng_for(cfg.seed, "warmup")

    freeze_all(model)
    head = PatchClassifier(mcfg.d_model, rng_for(cfg.seed, "warmup-head"))
    params = {f"vision.{k}": v for k, v in model.vision.named_parameters()}
    params.update({f"head.{k}": v for k, v in head.named_parameters()})
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(params, weight_decay=0.0)
    sched = LrSchedule(cfg.vision_lr, cfg.vision_lr * cfg.lr_min_ratio, max(cfg.vision_steps - 1, 1))
    for step in range(cfg.vision_steps):
        batch = [ids[int(i)] for i in rng.integers(0, len(ids), cfg.batch_size)]
        imgs = np.stack([scenes.images[i] for i in batch])
        labels = np.stack([scenes.prompt_grid(i, mcfg.grid_h, mcfg.grid_w).class_ids for i in batch])
        logits = linear(model.vision(imgs), head.weight, head.bias)
        loss = masked_cross_entropy(logits, labels.reshape(len(batch), -1),
                                    np.ones((len(batch), mcfg.n_image_tokens), bool))
        lr = cosine_lr(step, sched)
        val = _finite_or_abort(loss, step, lr, "vision")
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        result.history.append(StepRecord(step, lr, val, "vision"))
    freeze_all(model)

    if records is None:
        records = scenes.records.get("cpt", []) + scenes.records.get("cit_vl", [])
    records = list(records)
    lm_params = {k: v for k, v in model.parameters().items()
                 if not k.startswith(("vision.", "codebooks.", "connector.")) and ".adapters." not in k}
    for p in lm_params.values():
        p.requires_grad = True
    opt = AdamW(lm_params, weight_decay=0.0)
    sched = LrSchedule(cfg.lm_lr, cfg.lm_lr * cfg.lr_min_ratio, max(cfg.lm_steps - 1, 1))
    for step in range(cfg.lm_steps):
        batch = _homogeneous_batch(records, rng, cfg.batch_size)
        loss = batch_loss(model, batch, scenes, crayon_on=False)
        lr = cosine_lr(step, sched)
        val = _finite_or_abort(loss, step, lr, "lm")
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        result.history.append(StepRecord(step, lr, val, "lm"))
    freeze_all(model)
    model.quantize_base_()
    return result


def _homogeneous_batch(records, rng, size):
    # keep sequences of one task together so padding stays small
    first = records[int(rng.integers(len(records)))]
    same = [r for r in records if r.task == first.task] if first.task else records
    return [same[int(i)] for i in rng.integers(0, len(same), size)]


# ---------------------------------------------------------------------------
# CPT and CIT
# ---------------------------------------------------------------------------

def run_cpt(model: MultimodalLM, scenes: SceneSet, cfg: TrainConfig,
            records: Sequence[InstructionRecord] | None = None, log_fh: TextIO | None = None,
            on_step: Callable[[int], None] | None = None) -> RunResult:
    """Train only the codebooks and connector on crayon instructions, backbone frozen."""
    if cfg.stage != "CPT":
        raise ConfigError("run_cpt needs a CPT config")
    records = list(scenes.records.get("cpt", []) if records is None else records)
    if not records:
        raise ConfigError("CPT needs crayon instructions")
    model.set_prompt_flags(cfg.sem_query, cfg.num_query)
    freeze_all(model)
    if model.router is not None:
        model.router.route(CITMode.INFERENCE)
    params = prompt_params(model, cfg.sem_query, cfg.num_query)
    result = RunResult()
    if not params:
        log.info("CPT skipped: both query tables disabled")
        return result
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(params, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay,
                no_decay=_no_decay(params))
    auditor = FreezeAuditor(model, set(params))
    n_steps = cfg.n_steps(len(records))
    sched = cfg.schedule(n_steps)
    order = _epoch_order(len(records), n_steps * cfg.batch_size, derive_seed(cfg.seed, "cpt-order"))
    for step in range(n_steps):
        batch = [records[i] for i in order[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
        lr = cosine_lr(step, sched)
        loss = batch_loss(model, batch, scenes, crayon_on=True)
        val = _finite_or_abort(loss, step, lr, "CPT")
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        rec = StepRecord(step, lr, val, "CPT")
        result.history.append(rec)
        _emit(rec, log_fh)
        if (step + 1) % cfg.audit_every == 0:
            auditor.check(f"CPT step {step}")
        if on_step is not None:
            on_step(step)
    auditor.check("CPT end")
    freeze_all(model)
    return result


def _epoch_order(n: int, total: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    reps = math.ceil(total / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:total]


def run_cit(model: MultimodalLM, scenes: SceneSet, cfg: TrainConfig,
            pools: dict | None = None, log_fh: TextIO | None = None,
            on_step: Callable[[int, CITMode], None] | None = None) -> RunResult:
    """Per step: draw Image-CIT or VL-CIT, route adapters, take one AdamW step
    on a homogeneous batch of that kind."""
    if cfg.stage != "CIT":
        raise ConfigError("run_cit needs a CIT config")
    if not model.is_quantized:
        raise ConfigError("CIT expects a quantized, frozen base (run the warm-up/CPT first)")
    if pools is None:
        pools = {RecordKind.IMAGE_CIT: scenes.records.get("cit_image", []),
                 RecordKind.VL_CIT: scenes.records.get("cit_vl", [])}
    pools = {RecordKind(k): list(v) for k, v in pools.items()}
    needed = [k for k, p in ((RecordKind.IMAGE_CIT, cfg.p_image), (RecordKind.VL_CIT, 1 - cfg.p_image)) if p > 0]
    for kind in needed:
        if not pools.get(kind):
            raise ConfigError(f"{kind.value} pool is empty")

    model.set_prompt_flags(cfg.sem_query, cfg.num_query)
    freeze_all(model)
    router = model.router
    if router is None:
        router = model.attach_adapters(cfg.dual_qlora, rng_for(cfg.seed, "lora-init"))
    elif router.dual != cfg.dual_qlora:
        raise ConfigError("checkpoint adapter layout does not match dual_qlora flag")

    prompt = prompt_params(model, cfg.sem_query, cfg.num_query)
    adapters = {name: adapter_params(model, name) for name in router.adapter_names}
    params = dict(prompt)
    for group in adapters.values():
        params.update(group)
    opt = AdamW(params, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay,
                no_decay=_no_decay(params))
    always_frozen = FreezeAuditor(model, set(params))
    sampler = CitSampler(derive_seed(cfg.seed, "cit-sampler"), cfg.p_image)
    total = sum(len(v) for v in pools.values())
    n_steps = cfg.n_steps(total)
    sched = cfg.schedule(n_steps)
    result = RunResult()
    for step in range(n_steps):
        kind = sampler.draw_kind()
        mode = CITMode.IMAGE if kind is RecordKind.IMAGE_CIT else CITMode.VL
        router.route(mode)
        for p in prompt.values():
            p.requires_grad = True
        active = router.trainable_adapter(mode)
        audit_now = (step + 1) % cfg.audit_every == 0
        if audit_now:
            idle = {n: hash_arrays(p.data for p in adapters[n].values()) for n in adapters if n != active}
        batch = sampler.draw_batch(pools[kind], cfg.batch_size)
        lr = cosine_lr(step, sched)
        loss = batch_loss(model, batch, scenes, crayon_on=model.crayon_default)
        val = _finite_or_abort(loss, step, lr, mode.value)
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        if audit_now:
            for n, h in idle.items():
                if hash_arrays(p.data for p in adapters[n].values()) != h:
                    raise FreezeViolation(f"adapter {n!r} changed during a {mode.value} step {step}")
            always_frozen.check(f"CIT step {step}")
        rec = StepRecord(step, lr, val, mode.value)
        result.history.append(rec)
        _emit(rec, log_fh)
        if on_step is not None:
            on_step(step, mode)
    always_frozen.check("CIT end")
    router.route(CITMode.INFERENCE)
    freeze_all(model)
    return result
