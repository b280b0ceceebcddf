from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigError

# Reference values of the full-size model; the toy defaults below are what runs here.
FULL_SCALE_GRID_HW = (35, 35)
FULL_SCALE_PROMPT_WIDTH = 4096
FULL_SCALE_LORA_RANK = 64
FULL_SCALE_LORA_ALPHA = 64


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 0  # 0: take the tokenizer's size
    grid_h: int = 8
    grid_w: int = 8
    prompt_width: int = 64
    max_seq_len: int = 256
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.image_h % self.grid_h or self.image_w % self.grid_w:
            raise ConfigError("image size must split evenly into the patch grid")
        if min(self.d_model, self.n_layers, self.n_heads, self.grid_h, self.grid_w,
               self.prompt_width, self.lora_rank) <= 0:
            raise ConfigError("model dimensions must be positive")

    @property
    def n_image_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_h(self) -> int:
        return self.image_h // self.grid_h

    @property
    def patch_w(self) -> int:
        return self.image_w // self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def to_dict(self) -> dict:
        return asdict(self)
