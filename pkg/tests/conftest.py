import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_scenes():
    from crayonlm.panoptic import SceneConfig, THING_IDS, STUFF_IDS
    from crayonlm.scenes import synth_split

    cfg = SceneConfig(height=8, width=8, snap=2, max_objects=3, max_size=2, thing_pool=THING_IDS[:6],
                      background_pool=STUFF_IDS[:2], p_unk_image=0.15)
    return synth_split(3, "train", 12, cfg)


TINY_MODEL = dict(d_model=16, n_layers=2, n_heads=2, grid_h=2, grid_w=2, image_h=8, image_w=8,
                  prompt_width=8, max_seq_len=96, lora_rank=2, lora_alpha=2.0)


@pytest.fixture(scope="session")
def tiny_base_bytes(tiny_scenes):
    """A quantized stand-in base, serialized once per session."""
    from crayonlm.checkpoint import dumps_checkpoint
    from crayonlm.model import ModelConfig, MultimodalLM
    from crayonlm.train import WarmupConfig, pretrain_base

    model = MultimodalLM(ModelConfig(**TINY_MODEL), np.random.default_rng(0))
    pretrain_base(model, tiny_scenes, WarmupConfig(vision_steps=3, lm_steps=3, batch_size=4))
    return dumps_checkpoint(model)


@pytest.fixture
def tiny_base(tiny_base_bytes):
    from crayonlm.checkpoint import loads_checkpoint, model_from_contents

    return model_from_contents(loads_checkpoint(tiny_base_bytes))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
