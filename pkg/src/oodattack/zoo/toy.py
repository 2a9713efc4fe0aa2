"""Analytic, differentiable stand-in for a CLIP-style encoder.

Vision features are hand-built image statistics, every one smooth in the
pixels:

* per-channel means, centered on mid-gray,
* per-channel variances,
* a ``grid x grid`` average-pooled luminance map, centered on mid-gray,
* optionally, correlations with banks of fixed smooth zero-mean textures.

The texture responses stand in for the non-robust directions of a real
encoder: natural renders barely excite them, but a small structured
perturbation can. Presets that share a bank share those directions.

The projector is a seeded Gaussian linear map followed by L2 normalization.
The "text tower" is a lookup table of class prototypes: the projected mean
feature vector of canonical renders of each class.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import BuildError, NotFoundError
from .bundle import EncoderBundle, PromptEmbedding, format_prompt, l2_normalize
from .data import ToyWorldSpec, class_render_set, generate_toy_dataset, stack_images

ACCURACY_FLOOR = 0.90

LUMA = {
    "rec601": (0.299, 0.587, 0.114),
    "rec709": (0.2126, 0.7152, 0.0722),
    "flat": (1 / 3, 1 / 3, 1 / 3),
}


@dataclass(frozen=True)
class ToyEncoderConfig:
    grid: int = 4
    luma: str | tuple = "rec601"  # preset name or channel weights summing to 1
    mean_gain: float = 1.0
    var_gain: float = 4.0
    grid_gain: float = 1.0
    embed_dim: int = 32
    texture_banks: tuple = ()  # bank seeds; each contributes texture_per_bank features
    texture_per_bank: int = 8
    texture_gain: float = 0.0
    texture_sigma: float = 1.0


# Named members of the default toy pool. They share the mean/variance block but
# read luminance through different channel weights, so perturbations transfer
# only partially; toy-c sits between toy-a (red/green heavy) and toy-b (blue
# heavy) and also shares each of their texture banks, plus one of its own.
_TEXTURE = {"texture_per_bank": 8, "texture_gain": 20.0, "texture_sigma": 1.0}
TOY_PRESETS = {
    "toy-a": (0, ToyEncoderConfig(grid=4, luma="rec601", mean_gain=3.0, var_gain=2.0, texture_banks=(0,), **_TEXTURE)),
    "toy-b": (1, ToyEncoderConfig(grid=4, luma=(0.1, 0.2, 0.7), mean_gain=3.0, var_gain=1.0, texture_banks=(1,),
                                  **_TEXTURE)),
    "toy-c": (2, ToyEncoderConfig(grid=4, luma="flat", mean_gain=2.0, var_gain=2.0, grid_gain=1.5,
                                  texture_banks=(0, 1, 2), **_TEXTURE)),
}


def texture_patterns(banks, per_bank: int, size: int, sigma: float) -> torch.Tensor:
    """(len(banks) * per_bank, 3, size, size) smoothed Gaussian fields, zero mean per channel, unit RMS."""
    from scipy.ndimage import gaussian_filter

    out = []
    for bank in banks:
        rng = np.random.default_rng([int(bank), 0x7E47])
        for _ in range(per_bank):
            f = rng.normal(size=(3, size, size))
            f = np.stack([gaussian_filter(ch, sigma, mode="wrap") for ch in f])
            f -= f.mean(axis=(1, 2), keepdims=True)
            out.append(f / np.sqrt((f**2).mean()))
    if not out:
        return torch.zeros((0, 3, size, size), dtype=torch.float64)
    return torch.from_numpy(np.stack(out))


class ToyBundle(EncoderBundle):
    has_text_tower = True
    differentiable = True
    thread_safe = True

    def __init__(self, world: ToyWorldSpec, seed: int, config: ToyEncoderConfig, bundle_id: str | None = None):
        size = world.image_size
        if size % config.grid:
            raise BuildError(f"grid {config.grid} must divide image size {size}", module="model-zoo", key="grid")
        self.world = world
        self.seed = int(seed)
        self.config = config
        self.id = bundle_id or f"toy:seed={seed},grid={config.grid},luma={config.luma}"
        self.input_shape = (3, size, size)
        self._textures = texture_patterns(config.texture_banks, config.texture_per_bank, size, config.texture_sigma)
        self.feature_dim = 6 + config.grid**2 + self._textures.shape[0]
        self.embed_dim = config.embed_dim
        gen = torch.Generator().manual_seed(10_007 * self.seed + 17)
        self._proj = torch.randn(config.embed_dim, self.feature_dim, generator=gen, dtype=torch.float64)
        self._proj /= np.sqrt(self.feature_dim)
        weights = LUMA[config.luma] if isinstance(config.luma, str) else tuple(config.luma)
        if len(weights) != 3 or min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
            raise BuildError("luminance weights must be 3 nonnegative values summing to 1", module="model-zoo", key="luma")
        self._luma = torch.tensor(weights, dtype=torch.float64)
        self.prototypes = self._build_prototypes()

    def features(self, x):
        x = self.check_input(x)
        cfg = self.config
        means = x.mean(dim=(2, 3))
        var = x.var(dim=(2, 3), unbiased=False)
        lum = torch.einsum("c,nchw->nhw", self._luma, x)
        pooled = F.avg_pool2d(lum.unsqueeze(1), kernel_size=x.shape[-1] // cfg.grid).flatten(1)
        parts = [cfg.mean_gain * (means - 0.5), cfg.var_gain * var, cfg.grid_gain * (pooled - 0.5)]
        if self._textures.shape[0]:
            parts.append(cfg.texture_gain * torch.einsum("kchw,nchw->nk", self._textures, x) / x[0].numel())
        return torch.cat(parts, dim=1)

    def project(self, feats):
        return l2_normalize(feats @ self._proj.T)

    def _build_prototypes(self) -> dict[str, torch.Tensor]:
        table = {}
        for k, name in enumerate(self.world.class_names):
            imgs = torch.from_numpy(class_render_set(self.world, k))
            with torch.no_grad():
                centroid = self.features(imgs).mean(dim=0, keepdim=True)
                table[name] = self.project(centroid)[0]
        return table

    def _text_embedding(self, prompt: str) -> torch.Tensor:
        for name, vec in self.prototypes.items():
            if format_prompt(name) == prompt:
                return vec.clone()
        raise NotFoundError(f"toy bundle {self.id} has no prototype for prompt {prompt!r}", module="model-zoo", key="prompt")

    def prototype_table(self) -> list[PromptEmbedding]:
        return [self.prompt_embedding(n) for n in self.world.class_names]

    def describe(self) -> dict:
        return {"id": self.id, "seed": self.seed, "config": asdict(self.config), "world": self.world.to_dict()}


def zero_shot_accuracy(bundle: EncoderBundle, world: ToyWorldSpec, split="val", seed=0) -> float:
    samples = generate_toy_dataset(world, split, seed)
    x = torch.from_numpy(stack_images(samples))
    with torch.no_grad():
        emb = bundle.embed(x)
    protos = torch.stack([bundle.encode_text(format_prompt(n)) for n in world.class_names])
    pred = (emb @ protos.T).argmax(dim=1).numpy()
    labels = np.array([s.class_index for s in samples])
    return float((pred == labels).mean())


def build_toy_bundle(spec: ToyWorldSpec, seed: int = 0, config: ToyEncoderConfig | None = None,
                     bundle_id: str | None = None, check_accuracy: bool = True) -> ToyBundle:
    """Construct the toy encoder and enforce the zero-shot accuracy gate."""
    bundle = ToyBundle(spec, seed, config or ToyEncoderConfig(), bundle_id)
    if check_accuracy:
        acc = zero_shot_accuracy(bundle, spec, "val", seed=seed)
        if acc <= ACCURACY_FLOOR:
            raise BuildError(
                f"toy bundle {bundle.id} zero-shot accuracy {acc:.3f} <= {ACCURACY_FLOOR}; classes not separable",
                module="model-zoo",
                key="classes",
            )
    return bundle


def toy_preset(name: str, world: ToyWorldSpec | None = None) -> ToyBundle:
    if name not in TOY_PRESETS:
        raise NotFoundError(f"unknown toy bundle {name!r}", module="model-zoo", key="model_pool")
    seed, cfg = TOY_PRESETS[name]
    return build_toy_bundle(world or ToyWorldSpec(), seed, cfg, bundle_id=name)
