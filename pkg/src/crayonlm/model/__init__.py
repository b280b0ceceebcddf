from .config import FULL_SCALE_GRID_HW, FULL_SCALE_LORA_ALPHA, FULL_SCALE_LORA_RANK, FULL_SCALE_PROMPT_WIDTH, ModelConfig
from .generate import GenerationResult, beam_search, greedy, greedy_batch
from .tokenizer import IMAGE, STOP, Tokenizer
from .vlm import MultimodalLM, VisionEncoder, encode_image, image_to_patches

__all__ = [
    "FULL_SCALE_GRID_HW", "FULL_SCALE_LORA_ALPHA", "FULL_SCALE_LORA_RANK", "FULL_SCALE_PROMPT_WIDTH", "ModelConfig",
    "GenerationResult", "beam_search", "greedy", "greedy_batch", "IMAGE", "STOP", "Tokenizer",
    "MultimodalLM", "VisionEncoder", "encode_image", "image_to_patches",
]
