"""Encoder bundles: the analytic toy world and adapters for pretrained checkpoints."""

from .bundle import EncoderBundle, encode_image, encode_text, format_prompt, value_and_grad
from .data import ToyWorldSpec, export_toy_dataset, generate_toy_dataset
from .toy import TOY_PRESETS, ToyBundle, ToyEncoderConfig, build_toy_bundle, toy_preset

__all__ = [
    "EncoderBundle", "TOY_PRESETS", "ToyBundle", "ToyEncoderConfig", "ToyWorldSpec", "build_toy_bundle",
    "encode_image", "encode_text", "export_toy_dataset", "format_prompt", "generate_toy_dataset", "toy_preset",
    "value_and_grad",
]
