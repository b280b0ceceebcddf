"""Flat ``key = value`` run configuration with a fixed schema."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .panoptic import SceneConfig
from .panoptic.vocab import STUFF_IDS, THING_IDS
from .train import CIT_LR, CPT_LR, TrainConfig, WarmupConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    # dataset
    n_train: int = 64
    n_eval: int = 32
    image_size: int = 16
    min_objects: int = 1
    max_objects: int = 3
    max_object_cells: int = 2
    n_thing_classes: int = 16
    n_stuff_classes: int = 4
    noise_std: float = 0.3
    p_unk_image: float = 0.05
    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    grid_h: int = 4
    grid_w: int = 4
    prompt_width: int = 64
    max_seq_len: int = 160
    lora_rank: int = 8
    lora_alpha: float = 8.0
    # warm-up of the stand-in pretrained parts
    warmup_vision_steps: int = 300
    warmup_vision_lr: float = 3e-3
    warmup_lm_steps: int = 600
    warmup_lm_lr: float = 1e-3
    warmup_batch_size: int = 16
    # training
    batch_size: int = 8
    cpt_epochs: int = 1
    cpt_steps: int = 0
    cpt_lr_max: float = CPT_LR[0]
    cpt_lr_min: float = CPT_LR[1]
    cit_epochs: int = 1
    cit_steps: int = 0
    cit_lr_max: float = CIT_LR[0]
    cit_lr_min: float = CIT_LR[1]
    p_image: float = 0.5
    sem_query: bool = True
    num_query: bool = True
    dual_qlora: bool = True
    weight_decay: float = 0.01
    audit_every: int = 50
    # evaluation
    probe_split: str = "eval"

    def __post_init__(self):
        if not 1 <= self.n_thing_classes <= len(THING_IDS):
            raise ConfigError(f"n_thing_classes must lie in [1, {len(THING_IDS)}]")
        if not 1 <= self.n_stuff_classes <= len(STUFF_IDS):
            raise ConfigError(f"n_stuff_classes must lie in [1, {len(STUFF_IDS)}]")
        if self.n_train <= 0 or self.n_eval <= 0:
            raise ConfigError("split sizes must be positive")
        if self.probe_split not in ("train", "eval"):
            raise ConfigError("probe_split must be 'train' or 'eval'")
        try:
            self.scene_config(), self.model_config(), self.cpt_config(), self.cit_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def thing_pool(self) -> tuple[int, ...]:
        return tuple(THING_IDS[:self.n_thing_classes])

    def scene_config(self) -> SceneConfig:
        return SceneConfig(height=self.image_size, width=self.image_size, max_size=self.max_object_cells,
                           min_objects=self.min_objects, max_objects=self.max_objects,
                           thing_pool=self.thing_pool, background_pool=tuple(STUFF_IDS[:self.n_stuff_classes]),
                           noise_std=self.noise_std, p_unk_image=self.p_unk_image)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                           grid_h=self.grid_h, grid_w=self.grid_w, prompt_width=self.prompt_width,
                           image_h=self.image_size, image_w=self.image_size,
                           max_seq_len=self.max_seq_len, lora_rank=self.lora_rank, lora_alpha=self.lora_alpha)

    def warmup_config(self) -> WarmupConfig:
        return WarmupConfig(vision_steps=self.warmup_vision_steps, vision_lr=self.warmup_vision_lr,
                            lm_steps=self.warmup_lm_steps, lm_lr=self.warmup_lm_lr,
                            batch_size=self.warmup_batch_size, seed=self.seed)

    def _train(self, factory, prefix: str) -> TrainConfig:
        g = lambda k: getattr(self, f"{prefix}_{k}")  # noqa: E731
        return factory(batch_size=self.batch_size, epochs=g("epochs"), steps=g("steps"),
                       lr_max=g("lr_max"), lr_min=g("lr_min"), seed=self.seed,
                       sem_query=self.sem_query, num_query=self.num_query, dual_qlora=self.dual_qlora,
                       p_image=self.p_image, weight_decay=self.weight_decay, audit_every=self.audit_every)

    def cpt_config(self) -> TrainConfig:
        return self._train(TrainConfig.cpt, "cpt")

    def cit_config(self) -> TrainConfig:
        return self._train(TrainConfig.cit, "cit")

    def with_overrides(self, **kw) -> "RunConfig":
        unknown = set(kw) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in asdict(self).items())


_SCHEMA = {f.name: f.type for f in fields(RunConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str):
    kind = _SCHEMA[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return replace(base or RunConfig(), **values)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)
