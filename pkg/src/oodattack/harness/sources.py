"""Dataset ingestion and bundle resolution for campaigns."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, NotFoundError, ValidationError
from ..zoo.bundle import EncoderBundle
from ..zoo.data import ToyWorldSpec, generate_toy_dataset, stack_images
from ..zoo.toy import TOY_PRESETS, toy_preset
from .config import TaskSpec

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class Split:
    images: torch.Tensor  # (N, C, H, W) float64
    labels: list  # class name for ID splits, OOD source label otherwise
    class_index: np.ndarray  # -1 for OOD


@dataclass
class TaskData:
    class_names: list
    train: Split
    test: Split
    ood: Split | None

    @property
    def image_shape(self) -> tuple:
        return tuple(self.test.images.shape[1:])


def _toy_split(world: ToyWorldSpec, split: str, seed: int) -> Split:
    samples = generate_toy_dataset(world, split, seed)
    return Split(torch.from_numpy(stack_images(samples)), [s.label for s in samples],
                 np.array([s.class_index for s in samples], dtype=np.int64))


def _load_image(path: Path, size: int | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _read_tree(root: Path, class_names: list | None, size: int | None) -> Split:
    """``root/<label>/*.png``; labels outside ``class_names`` get index -1."""
    if not root.is_dir():
        raise NotFoundError(f"dataset directory {root} does not exist", module="harness", key="task.path")
    imgs, labels, idx = [], [], []
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    groups = [(d.name, _image_files(d)) for d in subdirs] or [(root.name, _image_files(root))]
    for label, files in groups:
        for f in files:
            imgs.append(_load_image(f, size))
            labels.append(label)
            idx.append(class_names.index(label) if class_names and label in class_names else -1)
    if not imgs:
        raise ValidationError(f"no images under {root}", module="harness", key="task.path")
    shapes = {a.shape for a in imgs}
    if len(shapes) != 1:
        raise ValidationError(f"mixed image sizes under {root}: {sorted(shapes)}; set task.image_size",
                              module="harness", key="task.image_size")
    return Split(torch.from_numpy(np.stack(imgs)), labels, np.array(idx, dtype=np.int64))


def _interleave(split: Split) -> Split:
    """Reorder so classes alternate, matching the toy generator's ordering."""
    seen: dict = {}
    rank = []
    for lab in split.labels:
        rank.append(seen.get(lab, 0))
        seen[lab] = rank[-1] + 1
    order = sorted(range(len(split.labels)), key=lambda i: (rank[i], split.class_index[i]))
    return Split(split.images[order], [split.labels[i] for i in order], split.class_index[order])


def load_task(task: TaskSpec, image_size: int | None = None) -> TaskData:
    if task.kind == "toy":
        w = task.world
        return TaskData(w.class_names, _toy_split(w, "train", task.seed), _toy_split(w, "test", task.seed),
                        _toy_split(w, "ood", task.seed) if w.ood_kinds else None)
    root = Path(task.path)
    size = task.image_size or image_size
    test_root = root / "test"
    if not test_root.is_dir():
        raise NotFoundError(f"{test_root} does not exist", module="harness", key="task.path")
    class_names = sorted(p.name for p in test_root.iterdir() if p.is_dir())
    if len(class_names) < 2:
        raise ValidationError("need at least two class directories under test/", module="harness", key="task.path")
    test = _interleave(_read_tree(test_root, class_names, size))
    train = _interleave(_read_tree(root / "train", class_names, size)) if (root / "train").is_dir() else test
    ood_roots = ([root / "ood"] if (root / "ood").is_dir() else []) + [Path(p) for p in task.ood_paths]
    ood = None
    for r in ood_roots:
        part = _read_tree(r, None, size)
        if ood is None:
            ood = part
        else:
            ood = Split(torch.cat([ood.images, part.images]), ood.labels + part.labels,
                        np.concatenate([ood.class_index, part.class_index]))
    return TaskData(class_names, train, test, ood)


def fit_input(bundle: EncoderBundle, x: torch.Tensor) -> torch.Tensor:
    """Bilinearly resize ``x`` to the bundle's input resolution when they differ."""
    h, w = bundle.input_shape[1:]
    if tuple(x.shape[-2:]) == (h, w):
        return x
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=True).clamp(0.0, 1.0)


# --------------------------------------------------------------------------- bundle registry

_REGISTRY: dict[str, Callable] = {}


def register_bundle(name: str, factory: Callable) -> None:
    """``factory(world, cache_dir) -> EncoderBundle``; overrides presets of the same name."""
    _REGISTRY[name] = factory


def unregister_bundle(name: str) -> None:
    _REGISTRY.pop(name, None)


def resolve_bundle(model_id: str, world: ToyWorldSpec, cache_dir=None) -> EncoderBundle:
    """Toy presets by name, registered factories, or ``hf:<repo id>`` through the weight cache."""
    if model_id in _REGISTRY:
        return _REGISTRY[model_id](world, cache_dir)
    if model_id in TOY_PRESETS:
        return toy_preset(model_id, world)
    if model_id.startswith("hf:"):
        from ..zoo.hub import OfflineClient, load_external_bundle

        return load_external_bundle(model_id[3:], cache_dir, client=OfflineClient())
    raise ConfigError(f"unknown model id {model_id!r}", module="harness", key="model_pool")


def known_model_ids() -> list[str]:
    return sorted(set(TOY_PRESETS) | set(_REGISTRY))
