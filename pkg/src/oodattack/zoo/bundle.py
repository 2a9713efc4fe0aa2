"""Frozen encoder bundle contract.

A bundle wraps a vision tower ``features`` (raw backbone features), a vision
projector ``project`` into the shared image/text space, and optionally a text
tower. Images are ``torch.float64`` tensors shaped ``(N, C, H, W)`` with pixel
values in ``[0, 1]``; single images ``(C, H, W)`` are accepted by the
module-level helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..errors import ConfigError, NumericError, UnsupportedBundleError, ValidationError

NORM_EPS = 1e-12
PROMPT_TEMPLATE = "this is a photo of a {}"


def format_prompt(class_name: str) -> str:
    if not isinstance(class_name, str) or not class_name.strip():
        raise ValidationError("class name must be a nonempty string", module="model-zoo", key="class_name")
    return PROMPT_TEMPLATE.format(class_name.replace("_", " ").strip())


def l2_normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # clamp keeps gradients finite on degenerate inputs
    return v / v.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)


@dataclass(frozen=True)
class PromptEmbedding:
    class_name: str
    prompt: str
    embedding: np.ndarray


@dataclass(frozen=True)
class ImageEncoding:
    features: torch.Tensor
    projected: torch.Tensor


class EncoderBundle:
    """Base class for frozen encoders.

    Subclasses implement :meth:`features`, :meth:`project` and, when
    ``has_text_tower`` is true, :meth:`_text_embedding`.
    ``thread_safe`` declares whether concurrent read-only evaluation is allowed;
    workers must pool their own copies otherwise.
    """

    id: str
    input_shape: tuple[int, int, int]
    feature_dim: int
    embed_dim: int
    has_text_tower: bool = False
    differentiable: bool = True
    thread_safe: bool = True

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.features(x))

    def _text_embedding(self, prompt: str) -> torch.Tensor:
        raise NotImplementedError

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ConfigError(
                f"image shape {tuple(x.shape)} does not match bundle input {self.input_shape}",
                module="model-zoo",
                key=f"{self.id}.input_shape",
            )
        return x

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not self.has_text_tower:
            raise UnsupportedBundleError(f"bundle {self.id} has no text tower", module="model-zoo", key="has_text_tower")
        return self._text_embedding(prompt)

    def prompt_embedding(self, class_name: str) -> PromptEmbedding:
        prompt = format_prompt(class_name)
        vec = self.encode_text(prompt).detach().cpu().numpy().astype(np.float64)
        return PromptEmbedding(class_name, prompt, vec)

    def value_and_grad(self, loss: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor):
        """Evaluate ``loss`` at ``x`` and return ``(value, d loss / d x)``.

        ``loss`` may return a scalar or one value per batch row; in the batched
        case rows are assumed independent and the gradient of their sum is
        returned, which is the per-row gradient.
        """
        if not self.differentiable:
            raise UnsupportedBundleError(f"bundle {self.id} is not differentiable", module="model-zoo", key="differentiable")
        x = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            value = loss(x)
            if not torch.isfinite(value).all():
                raise NumericError(
                    "nonfinite loss value",
                    module="model-zoo",
                    key=self.id,
                    diagnostics={"value": value.detach().cpu().numpy().tolist()},
                )
            (grad,) = torch.autograd.grad(value.sum(), x)
        if not torch.isfinite(grad).all():
            raise NumericError("nonfinite input gradient", module="model-zoo", key=self.id)
        return value.detach(), grad.detach()


def as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    x = x.to(torch.float64)
    return x.unsqueeze(0) if x.dim() == 3 else x


def encode_image(bundle: EncoderBundle, x) -> ImageEncoding:
    """Features and unit-norm projected embedding; batch dim preserved as given."""
    single = (x.dim() if isinstance(x, torch.Tensor) else np.ndim(x)) == 3
    xb = bundle.check_input(as_batch(x))
    with torch.no_grad():
        feats = bundle.features(xb)
        proj = bundle.project(feats)
    if single:
        return ImageEncoding(feats[0], proj[0])
    return ImageEncoding(feats, proj)


def encode_text(bundle: EncoderBundle, prompt: str) -> torch.Tensor:
    with torch.no_grad():
        return bundle.encode_text(prompt)


def value_and_grad(bundle: EncoderBundle, loss, x):
    single = (x.dim() if isinstance(x, torch.Tensor) else np.ndim(x)) == 3
    value, grad = bundle.value_and_grad(loss, as_batch(x))
    if single:
        return value.reshape(-1)[0] if value.numel() == 1 else value, grad[0]
    return value, grad
