"""Toy multimodal decoder: patch encoder, causal transformer, crayon injection."""

from __future__ import annotations

import numpy as np

from ..core import (
    Module, Tensor, concat, embedding, gelu, linear, log_softmax, matmul, no_grad, rms_norm, softmax,
)
from ..core.module import normal_param, ones_param, zeros_param
from ..crayon import Connector, CrayonCodebooks, build_prompt, connect, inject
from ..errors import ProtocolError, ShapeError
from ..qlora import DualAdapterRouter, QLoRALinear
from .config import ModelConfig
from .generate import GenerationResult, beam_search, greedy, greedy_batch
from .tokenizer import Tokenizer

_NEG_INF = -1e9


def image_to_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, h*w, ph*pw*C), patches in row-major order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    if H % cfg.grid_h or W % cfg.grid_w or (H, W, C) != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ShapeError(f"image {images.shape[1:]} does not split into a {cfg.grid_h}x{cfg.grid_w} patch grid")
    ph, pw = H // cfg.grid_h, W // cfg.grid_w
    x = images.reshape(B, cfg.grid_h, ph, cfg.grid_w, pw, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, cfg.grid_h * cfg.grid_w, ph * pw * C))


class VisionEncoder(Module):
    """Per-patch linear projection plus a learned row/column positional table."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.patch_weight = normal_param(rng, (cfg.d_model, cfg.patch_dim), 1.0 / np.sqrt(cfg.patch_dim))
        self.patch_bias = zeros_param((cfg.d_model,))
        self.row_pos = normal_param(rng, (cfg.grid_h, cfg.d_model), 0.02)
        self.col_pos = normal_param(rng, (cfg.grid_w, cfg.d_model), 0.02)

    def __call__(self, images: np.ndarray) -> Tensor:
        cfg = self._cfg
        patches = Tensor(image_to_patches(images, cfg).astype(self.patch_weight.dtype))
        pos = (self.row_pos.reshape(cfg.grid_h, 1, cfg.d_model)
               + self.col_pos.reshape(1, cfg.grid_w, cfg.d_model)).reshape(cfg.grid_h * cfg.grid_w, cfg.d_model)
        return linear(patches, self.patch_weight, self.patch_bias) + pos


def encode_image(encoder: VisionEncoder, image: np.ndarray) -> Tensor:
    out = encoder(image)
    return out[0] if np.asarray(image).ndim == 3 else out


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.d_model, 0.02
        self.attn_norm = ones_param((d,))
        self.q = QLoRALinear(normal_param(rng, (d, d), std))
        self.k = QLoRALinear(normal_param(rng, (d, d), std))
        self.v = QLoRALinear(normal_param(rng, (d, d), std))
        self.o = QLoRALinear(normal_param(rng, (d, d), std / np.sqrt(2 * cfg.n_layers)))
        self.mlp_norm = ones_param((d,))
        self.fc1 = QLoRALinear(normal_param(rng, (cfg.mlp_ratio * d, d), std))
        self.fc2 = QLoRALinear(normal_param(rng, (d, cfg.mlp_ratio * d), std / np.sqrt(2 * cfg.n_layers)))
        self._heads = cfg.n_heads

    def attention(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = x.shape
        H = self._heads
        dh = d // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask
        att = matmul(softmax(scores, axis=-1), v)
        return self.o(att.transpose(0, 2, 1, 3).reshape(B, T, d))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attention(rms_norm(x, self.attn_norm), mask)
        h = self.fc2(gelu(self.fc1(rms_norm(x, self.mlp_norm))))
        return x + h


class MultimodalLM(Module):
    """Decoder-only LM over ``[text before <image>] ++ image tokens ++ [text after]``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, tokenizer: Tokenizer | None = None,
                 use_semantic: bool = True, use_numbering: bool = True):
        self._tok = tokenizer or Tokenizer()
        if cfg.vocab_size == 0:
            cfg = ModelConfig(**{**cfg.to_dict(), "vocab_size": len(self._tok)})
        if cfg.vocab_size != len(self._tok):
            raise ShapeError("vocab_size does not match the tokenizer")
        self._cfg = cfg
        self._use_semantic = use_semantic
        self._use_numbering = use_numbering
        self.vision = VisionEncoder(cfg, rng)
        self.token_emb = normal_param(rng, (cfg.vocab_size, cfg.d_model), 0.02)
        self.pos_emb = normal_param(rng, (cfg.max_seq_len, cfg.d_model), 0.02)
        self.codebooks = CrayonCodebooks(cfg.prompt_width, rng)
        self.connector = Connector(cfg.prompt_width, cfg.d_model, rng)
        self.layers = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = ones_param((cfg.d_model,))
        self.lm_head = normal_param(rng, (cfg.vocab_size, cfg.d_model), 0.02)
        self._router: DualAdapterRouter | None = None

    # -- configuration -----------------------------------------------------
    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def tokenizer(self) -> Tokenizer:
        return self._tok

    @property
    def router(self) -> DualAdapterRouter | None:
        return self._router

    @property
    def prompt_flags(self) -> tuple[bool, bool]:
        return self._use_semantic, self._use_numbering

    def set_prompt_flags(self, use_semantic: bool, use_numbering: bool) -> None:
        self._use_semantic, self._use_numbering = bool(use_semantic), bool(use_numbering)

    @property
    def crayon_default(self) -> bool:
        return self._use_semantic or self._use_numbering

    def projections(self) -> list[QLoRALinear]:
        """The attention projections that carry adapters."""
        return [p for blk in self.layers for p in (blk.q, blk.k, blk.v, blk.o)]

    def base_linears(self) -> list[tuple[str, QLoRALinear]]:
        out = []
        for i, blk in enumerate(self.layers):
            for name in ("q", "k", "v", "o", "fc1", "fc2"):
                out.append((f"layers.{i}.{name}", getattr(blk, name)))
        return out

    def quantize_base_(self) -> None:
        for _, lin in self.base_linears():
            lin.quantize_()

    @property
    def is_quantized(self) -> bool:
        return all(lin.quantized is not None for _, lin in self.base_linears())

    def attach_adapters(self, dual: bool, rng: np.random.Generator) -> DualAdapterRouter:
        names = ("image", "vl") if dual else ("shared",)
        for proj in self.projections():
            for name in names:
                proj.add_adapter(name, self._cfg.lora_rank, self._cfg.lora_alpha, rng)
        self._router = DualAdapterRouter(self.projections(), dual=dual)
        self._router.route("InferenceBoth")
        return self._router

    def astype(self, dtype) -> "MultimodalLM":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    # -- forward ------------------------------------------------------------
    def prompt_rows(self, class_ids: np.ndarray, numbers: np.ndarray) -> Tensor:
        prompt = build_prompt(class_ids, numbers, self.codebooks, self._use_semantic, self._use_numbering)
        return connect(prompt, self.connector)

    def embed(self, ids: np.ndarray, images=None) -> tuple[Tensor, int | None]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, T = ids.shape
        img_id = self._tok.image_id
        hits = ids == img_id
        counts = hits.sum(axis=1)
        if np.any(counts > 1):
            raise ProtocolError("<image> may occur at most once per sequence")
        text = embedding(self.token_emb, ids)
        if not counts.any():
            start = None
            x = text
        else:
            if not np.all(counts == 1):
                raise ProtocolError("mixed batch: some sequences lack <image>")
            pos = np.argmax(hits, axis=1)
            if np.any(pos != pos[0]):
                raise ProtocolError("<image> must sit at the same index across a batch")
            if images is None:
                raise ProtocolError("sequence contains <image> but no image was given")
            start = int(pos[0])
            img = self.vision(np.asarray(images).reshape(B, *np.shape(images)[-3:]))
            x = concat([text[:, :start], img, text[:, start + 1:]], axis=1)
        L = x.shape[1]
        if L > self._cfg.max_seq_len:
            raise ProtocolError(f"expanded length {L} exceeds max_seq_len {self._cfg.max_seq_len}")
        return x + self.pos_emb[:L], start

    def forward(self, ids, images=None, class_ids=None, numbers=None, crayon_on: bool | None = None) -> Tensor:
        """Logits of shape (B, T - 1 + h*w, V) (or (B, T, V) without an image)."""
        if crayon_on is None:
            crayon_on = self.crayon_default
        x, start = self.embed(ids, images)
        B, L, _ = x.shape
        rows = None
        if crayon_on and start is not None:
            if class_ids is None or numbers is None:
                raise ProtocolError("crayon prompt requested without a panoptic grid")
            hw = (self._cfg.grid_h, self._cfg.grid_w)
            class_ids = np.asarray(class_ids).reshape(B, *hw)
            numbers = np.asarray(numbers).reshape(B, *hw)
            rows = self.prompt_rows(class_ids, numbers)
        mask = np.triu(np.full((L, L), _NEG_INF, dtype=x.dtype), k=1)
        for blk in self.layers:
            if rows is not None:
                x = inject(x, rows, start)
            x = blk(x, mask)
        return linear(rms_norm(x, self.final_norm), self.lm_head)

    __call__ = forward

    # -- generation -----------------------------------------------------------
    def _next_fn(self, image, class_ids, numbers, crayon_on):
        def fn(seqs):
            n = len(seqs)
            imgs = None if image is None else np.broadcast_to(image, (n,) + np.shape(image)[-3:])
            cls = None if class_ids is None else np.broadcast_to(class_ids, (n,) + np.shape(class_ids)[-2:])
            num = None if numbers is None else np.broadcast_to(numbers, (n,) + np.shape(numbers)[-2:])
            with no_grad():
                logits = self.forward(np.asarray(seqs), imgs, cls, num, crayon_on)
            return log_softmax(logits[:, -1]).data
        return fn

    def generate(self, prefix, image=None, class_ids=None, numbers=None, mode: str = "greedy",
                 beam_size: int = 3, max_new_tokens: int = 32, crayon_on: bool | None = None) -> GenerationResult:
        fn = self._next_fn(image, class_ids, numbers, crayon_on)
        if mode == "greedy":
            return greedy(fn, prefix, self._tok.stop_id, max_new_tokens)
        if mode == "beam":
            return beam_search(fn, prefix, beam_size, self._tok.stop_id, max_new_tokens)
        raise ValueError(f"unknown decoding mode {mode!r}")

    def generate_batch(self, prefixes, images, class_ids, numbers, max_new_tokens: int = 4,
                       crayon_on: bool | None = None) -> list[GenerationResult]:
        """Batched greedy decoding for equal-length prefixes, one image each."""
        images = np.asarray(images)
        class_ids = None if class_ids is None else np.asarray(class_ids)
        numbers = None if numbers is None else np.asarray(numbers)

        def fn(seqs):
            with no_grad():
                logits = self.forward(np.asarray(seqs), images, class_ids, numbers, crayon_on)
            return log_softmax(logits[:, -1]).data

        return greedy_batch(fn, prefixes, self._tok.stop_id, max_new_tokens)
