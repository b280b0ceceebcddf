import io
import math

import numpy as np
import pytest

from crayonlm.checkpoint import dumps_checkpoint
from crayonlm.core import cosine_lr, tensor
from crayonlm.datagen import RecordKind
from crayonlm.errors import ConfigError, FreezeViolation, TrainingAbort
from crayonlm.qlora import CITMode
from crayonlm.train import (
    CIT_LR,
    CPT_LR,
    FreezeAuditor,
    TrainConfig,
    adapter_params,
    collate,
    group_hashes,
    hash_arrays,
    loss_of,
    prompt_params,
    run_cit,
    run_cpt,
)


def snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


def changed(before, model):
    now = dict(model.named_parameters())
    return {k for k, v in before.items() if not np.array_equal(v, now[k].data)}


# -- config ----------------------------------------------------------------

def test_stage_learning_rate_defaults():
    assert (TrainConfig.cpt().lr_max, TrainConfig.cpt().lr_min) == CPT_LR == (1e-4, 1e-6)
    assert (TrainConfig.cit().lr_max, TrainConfig.cit().lr_min) == CIT_LR == (1e-5, 1e-6)


@pytest.mark.parametrize("kw", [dict(lr_max=1e-6, lr_min=1e-4), dict(lr_min=0.0), dict(batch_size=0),
                                dict(stage="RLHF")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_step_count():
    assert TrainConfig(batch_size=8, epochs=2).n_steps(17) == 6
    assert TrainConfig(steps=5).n_steps(1000) == 5


# -- loss ------------------------------------------------------------------

def test_collate_alignment(tiny_base, tiny_scenes):
    rec = tiny_scenes.records["cit_vl"][0]
    ids, targets, mask = collate([rec], tiny_base)
    hw = tiny_base.config.n_image_tokens
    n_answer = len(tiny_base.tokenizer.encode(rec.answer)) + 1
    assert mask.sum() == n_answer
    # the last masked target is <stop>, predicted from the expanded position before it
    last = np.nonzero(mask[0])[0][-1]
    assert targets[0, last] == tiny_base.tokenizer.stop_id
    assert last == ids.shape[1] - 3 + hw  # expanded length is T - 1 + hw


def test_loss_matches_scalar_reference(tiny_base, tiny_scenes):
    rec = tiny_scenes.records["cit_vl"][0]
    tok = tiny_base.tokenizer
    ids, targets, mask = collate([rec], tiny_base)
    imgs, cls, num = tiny_scenes.batch_arrays([rec], 2, 2)
    logits = tiny_base(ids, imgs, cls, num).data.astype(np.float64)[0]
    total, n = 0.0, 0
    for p in range(logits.shape[0]):
        if mask[0, p]:
            row = logits[p]
            mx = max(row)
            total -= row[targets[0, p]] - (mx + math.log(sum(math.exp(v - mx) for v in row)))
            n += 1
    assert n == len(tok.encode(rec.answer)) + 1
    assert float(loss_of(rec, tiny_base, tiny_scenes).data) == pytest.approx(total / n, rel=1e-5)


def test_question_targets_do_not_matter(tiny_base, tiny_scenes):
    from crayonlm.core import masked_cross_entropy

    rec = tiny_scenes.records["cit_vl"][1]
    ids, targets, mask = collate([rec], tiny_base)
    imgs, cls, num = tiny_scenes.batch_arrays([rec], 2, 2)
    logits = tiny_base(ids, imgs, cls, num)
    alt = targets.copy()
    alt[~mask] = (alt[~mask] + 7) % len(tiny_base.tokenizer)
    assert masked_cross_entropy(logits, targets, mask).data == masked_cross_entropy(logits, alt, mask).data


def test_perfect_copier_has_zero_loss(tiny_base, tiny_scenes):
    from crayonlm.core import masked_cross_entropy

    recs = tiny_scenes.records["cpt"][:3]
    ids, targets, mask = collate(recs, tiny_base)
    logits = np.full(targets.shape + (len(tiny_base.tokenizer),), -1e4, np.float32)
    np.put_along_axis(logits, targets[..., None], 1e4, axis=-1)
    assert float(masked_cross_entropy(tensor(logits), targets, mask).data) == 0.0


def test_empty_answer_rejected(tiny_base, tiny_scenes):
    from dataclasses import replace

    with pytest.raises(ValueError):
        loss_of(replace(tiny_scenes.records["cit_vl"][0], answer=""), tiny_base, tiny_scenes)


# -- CPT -------------------------------------------------------------------

def test_cpt_changes_only_prompt_params(tiny_base, tiny_scenes):
    before = snapshot(tiny_base)
    log = io.StringIO()
    res = run_cpt(tiny_base, tiny_scenes, TrainConfig.cpt(batch_size=4, epochs=2, lr_max=1e-2, lr_min=1e-4,
                                                          audit_every=1), log_fh=log)
    moved = changed(before, tiny_base)
    allowed = set(prompt_params(tiny_base, True, True))
    assert moved and moved <= allowed
    assert "codebooks.semantic" in moved and "connector.fc2_weight" in moved
    lines = log.getvalue().splitlines()
    assert len(lines) == len(res.history)
    step, lr, loss, mode = lines[0].split(" ")
    assert (int(step), mode) == (0, "CPT") and float(lr) == pytest.approx(1e-2, rel=1e-6)


def test_cpt_absent_class_rows_unchanged(tiny_base, tiny_scenes):
    before = tiny_base.codebooks.semantic.data.copy()
    run_cpt(tiny_base, tiny_scenes, TrainConfig.cpt(batch_size=4, steps=4, lr_max=1e-2, lr_min=1e-4))
    used = set()
    for rec in tiny_scenes.records["cpt"]:
        used |= set(np.unique(tiny_scenes.prompt_grid(rec.grid, 2, 2).class_ids).tolist())
    after = tiny_base.codebooks.semantic.data
    rows_moved = {i for i in range(after.shape[0]) if not np.array_equal(before[i], after[i])}
    assert rows_moved and rows_moved <= used
    untouched = [i for i in range(after.shape[0]) if i not in used]
    np.testing.assert_array_equal(after[untouched], before[untouched])


def test_cpt_lr_trace_matches_schedule(tiny_base, tiny_scenes):
    cfg = TrainConfig.cpt(batch_size=4, steps=7)
    res = run_cpt(tiny_base, tiny_scenes, cfg)
    sched = cfg.schedule(7)
    assert res.lrs == [cosine_lr(t, sched) for t in range(7)]
    assert res.lrs[0] == pytest.approx(1e-4, rel=1e-12) and res.lrs[-1] == pytest.approx(1e-6, rel=1e-12)


def test_cpt_loss_decreases(tiny_base, tiny_scenes):
    res = run_cpt(tiny_base, tiny_scenes, TrainConfig.cpt(batch_size=10, steps=40, lr_max=3e-2, lr_min=1e-3))
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])


def test_cpt_skipped_with_both_tables_off(tiny_base, tiny_scenes):
    before = snapshot(tiny_base)
    res = run_cpt(tiny_base, tiny_scenes, TrainConfig.cpt(sem_query=False, num_query=False))
    assert res.history == [] and not changed(before, tiny_base)


def test_nan_loss_aborts(tiny_base, tiny_scenes):
    tiny_base.lm_head.data[:] = np.nan
    with pytest.raises(TrainingAbort):
        run_cpt(tiny_base, tiny_scenes, TrainConfig.cpt(steps=2))


def test_auditor_detects_tampering(tiny_base):
    aud = FreezeAuditor(tiny_base, set())
    aud.check("start")
    tiny_base.token_emb.data[0, 0] += 1
    with pytest.raises(FreezeViolation):
        aud.check("after")
    assert "base.quantized" in group_hashes(tiny_base, set())


# -- CIT -------------------------------------------------------------------

def _cit_cfg(**kw):
    return TrainConfig.cit(**{"batch_size": 4, "steps": 12, "lr_max": 1e-2, "lr_min": 1e-4, "audit_every": 1, **kw})


def test_cit_routes_and_isolates_adapters(tiny_base, tiny_scenes):
    seen = []
    hashes = {}

    def on_step(step, mode):
        cur = {n: hash_arrays(p.data for p in adapter_params(tiny_base, n).values()) for n in ("image", "vl")}
        if hashes:
            idle = "vl" if mode is CITMode.IMAGE else "image"
            assert cur[idle] == hashes["last"][idle]
        hashes["last"] = cur
        seen.append(mode)

    qbytes = [lin.quantized.content_bytes() for _, lin in tiny_base.base_linears()]
    before = snapshot(tiny_base)
    run_cit(tiny_base, tiny_scenes, _cit_cfg(), on_step=on_step)
    hashes.clear()
    assert set(seen) == {CITMode.IMAGE, CITMode.VL}
    assert [lin.quantized.content_bytes() for _, lin in tiny_base.base_linears()] == qbytes
    moved = changed({k: v for k, v in before.items()}, tiny_base)
    frozen_groups = ("vision.", "token_emb", "pos_emb", "lm_head", "final_norm")
    assert not any(k.startswith(frozen_groups) for k in moved)
    assert tiny_base.router.mode is CITMode.INFERENCE


def test_cit_single_adapter_trains_on_mixed_stream(tiny_base, tiny_scenes):
    modes = []
    run_cit(tiny_base, tiny_scenes, _cit_cfg(dual_qlora=False), on_step=lambda s, m: modes.append(m))
    assert tiny_base.router.adapter_names == ("shared",)
    assert set(modes) == {CITMode.IMAGE, CITMode.VL}
    assert any(np.any(p.data) for k, p in adapter_params(tiny_base, "shared").items() if k.endswith(".B"))


def test_cit_without_queries_injects_nothing(tiny_base, tiny_scenes, monkeypatch):
    from crayonlm.model import vlm

    calls = []
    monkeypatch.setattr(vlm, "inject", lambda *a: calls.append(1) or a[0])
    before = {k: tiny_base.parameters()[k].data.copy() for k in prompt_params(tiny_base, True, True)}
    run_cit(tiny_base, tiny_scenes, _cit_cfg(sem_query=False, num_query=False, steps=4))
    assert calls == []
    for k, v in before.items():
        np.testing.assert_array_equal(tiny_base.parameters()[k].data, v)


def test_cit_needs_quantized_base(tiny_scenes):
    from crayonlm.model import ModelConfig, MultimodalLM
    from tests.conftest import TINY_MODEL

    fresh = MultimodalLM(ModelConfig(**TINY_MODEL), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        run_cit(fresh, tiny_scenes, _cit_cfg())


def test_cit_empty_pool(tiny_base, tiny_scenes):
    with pytest.raises(ConfigError):
        run_cit(tiny_base, tiny_scenes, _cit_cfg(), pools={RecordKind.IMAGE_CIT: [], RecordKind.VL_CIT: [1]})


def test_cit_lr_endpoints(tiny_base, tiny_scenes):
    res = run_cit(tiny_base, tiny_scenes, TrainConfig.cit(batch_size=4, steps=6))
    assert res.lrs[0] == pytest.approx(1e-5, rel=1e-12) and res.lrs[-1] == pytest.approx(1e-6, rel=1e-12)


def test_pipeline_bit_reproducible(tiny_base_bytes, tiny_scenes):
    from crayonlm.checkpoint import loads_checkpoint, model_from_contents

    outs = []
    for _ in range(2):
        m = model_from_contents(loads_checkpoint(tiny_base_bytes))
        run_cpt(m, tiny_scenes, TrainConfig.cpt(batch_size=4, steps=5, seed=4))
        run_cit(m, tiny_scenes, TrainConfig.cit(batch_size=4, steps=5, seed=4))
        outs.append(dumps_checkpoint(m))
    assert outs[0] == outs[1]
