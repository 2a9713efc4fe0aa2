"""Weight cache and adapters for pretrained encoders.

Cache layout::

    <cache_dir>/<model_id>/<digest>/weights/...   downloaded files
    <cache_dir>/<model_id>/<digest>/manifest.json

``digest`` is a sha256 over the sorted (relative path, file sha256) pairs of
``weights/``. A warm cache never touches the network; a cache entry whose files
no longer hash to its digest is evicted and reported as an integrity error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path

import torch
from filelock import FileLock

from ..errors import IntegrityError, NetworkError, NotFoundError, UnsupportedBundleError
from .bundle import EncoderBundle, l2_normalize

log = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1
CACHE_ENV = "OODATTACK_CACHE_DIR"

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
TOKENIZER_FILES = ("vocab.json", "tokenizer.json")


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "oodattack"))


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root: Path) -> tuple[str, dict]:
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            files[p.relative_to(root).as_posix()] = _sha256_file(p)
    h = hashlib.sha256()
    for rel, digest in files.items():
        h.update(f"{rel}\0{digest}\n".encode())
    return h.hexdigest(), files


class HuggingFaceClient:
    """Downloads a model repository snapshot from the Hugging Face hub."""

    def fetch(self, model_id: str, dest: Path) -> None:
        try:
            from huggingface_hub import snapshot_download
            from huggingface_hub.errors import RepositoryNotFoundError
        except ImportError as e:  # pragma: no cover - dependency of transformers
            raise NetworkError("huggingface_hub is not installed", module="model-zoo", key="hub") from e
        try:
            snapshot_download(repo_id=model_id, local_dir=str(dest),
                              allow_patterns=["*.json", "*.txt", "*.safetensors", "*.model"])
        except RepositoryNotFoundError as e:
            raise NotFoundError(f"unknown model id {model_id!r}", module="model-zoo", key="model_id") from e
        except OSError as e:
            raise NetworkError(f"download of {model_id!r} failed: {e}", module="model-zoo", key="model_id") from e


class OfflineClient:
    """Refuses to download; campaigns use this so only ``model-fetch`` touches the network."""

    def fetch(self, model_id: str, dest: Path) -> None:
        raise NetworkError(f"{model_id!r} is not in the weight cache and campaigns run offline; "
                           "run model-fetch first", module="model-zoo", key="model_pool")


class ModelCache:
    def __init__(self, cache_dir=None, client=None):
        self.root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.client = client if client is not None else HuggingFaceClient()

    def _model_dir(self, model_id: str) -> Path:
        return self.root / model_id

    def entries(self, model_id: str) -> list[Path]:
        d = self._model_dir(model_id)
        if not d.is_dir():
            return []
        return sorted(p for p in d.iterdir() if (p / "manifest.json").is_file())

    def verify(self, entry: Path) -> dict:
        manifest = json.loads((entry / "manifest.json").read_text())
        digest, _ = tree_digest(entry / "weights")
        if digest != manifest.get("digest") or digest != entry.name:
            shutil.rmtree(entry, ignore_errors=True)
            raise IntegrityError(
                f"cache entry {entry} failed its digest check and was evicted",
                module="model-zoo",
                key="cache_dir",
            )
        return manifest

    def resolve(self, model_id: str) -> tuple[Path, dict]:
        """Return ``(weights_dir, manifest)``, downloading on a cold cache."""
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / (model_id.replace("/", "__") + ".lock")
        with FileLock(str(lock_path)):
            entries = self.entries(model_id)
            if entries:
                entry = entries[-1]
                return entry / "weights", self.verify(entry)
            staging = Path(tempfile.mkdtemp(dir=self.root, prefix=".staging-"))
            try:
                self.client.fetch(model_id, staging)
                digest, files = tree_digest(staging)
                if not files:
                    raise NotFoundError(f"no files fetched for {model_id!r}", module="model-zoo", key="model_id")
                entry = self._model_dir(model_id) / digest
                entry.mkdir(parents=True, exist_ok=True)
                shutil.move(str(staging), str(entry / "weights"))
                manifest = {"schema_version": CACHE_SCHEMA_VERSION, "model_id": model_id, "digest": digest,
                            "files": files}
                (entry / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
                log.info("cached %s at %s", model_id, entry)
                return entry / "weights", manifest
            finally:
                shutil.rmtree(staging, ignore_errors=True)


class ClipBundle(EncoderBundle):
    """Wraps a ``transformers`` CLIP checkpoint behind the bundle contract.

    Inputs are unit-interval images at the model's native resolution; CLIP
    mean/std normalization happens inside :meth:`features`, so attack budgets
    stay in pixel units.
    """

    differentiable = True
    thread_safe = True

    def __init__(self, weights_dir: Path, bundle_id: str):
        from transformers import CLIPModel

        self.model = CLIPModel.from_pretrained(str(weights_dir)).eval().requires_grad_(False)
        cfg = self.model.config
        size = cfg.vision_config.image_size
        self.id = bundle_id
        self.input_shape = (3, size, size)
        self.feature_dim = cfg.vision_config.hidden_size
        self.embed_dim = cfg.projection_dim
        self._mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
        self.tokenizer = None
        # recent transformers versions hand back a placeholder tokenizer when no vocabulary exists
        if any((weights_dir / name).is_file() for name in TOKENIZER_FILES):
            try:
                from transformers import CLIPTokenizer

                self.tokenizer = CLIPTokenizer.from_pretrained(str(weights_dir))
            except (OSError, ValueError, TypeError):
                self.tokenizer = None
        if self.tokenizer is None:
            log.warning("no tokenizer found for %s; text tower disabled", bundle_id)
        self.has_text_tower = self.tokenizer is not None

    def features(self, x):
        x = self.check_input(x)
        pix = ((x.float() - self._mean) / self._std)
        out = self.model.vision_model(pixel_values=pix)
        return out.pooler_output.double()

    def project(self, feats):
        return l2_normalize(self.model.visual_projection(feats.float()).double())

    def _text_embedding(self, prompt: str) -> torch.Tensor:
        if self.tokenizer is None:
            raise UnsupportedBundleError(f"bundle {self.id} has no tokenizer", module="model-zoo", key="has_text_tower")
        tok = self.tokenizer([prompt], return_tensors="pt", padding=True)
        with torch.no_grad():
            out = self.model.text_model(input_ids=tok["input_ids"], attention_mask=tok.get("attention_mask"))
            emb = self.model.text_projection(out.pooler_output)
        return l2_normalize(emb.double())[0]


class VisionOnlyBundle(EncoderBundle):
    """Generic ``transformers`` vision backbone without a text tower (e.g. DINOv2)."""

    has_text_tower = False
    differentiable = True
    thread_safe = True

    def __init__(self, weights_dir: Path, bundle_id: str):
        from transformers import AutoConfig, AutoModel

        cfg = AutoConfig.from_pretrained(str(weights_dir))
        self.model = AutoModel.from_pretrained(str(weights_dir)).eval().requires_grad_(False)
        size = getattr(cfg, "image_size", 224)
        self.id = bundle_id
        self.input_shape = (3, size, size)
        self.feature_dim = cfg.hidden_size
        self.embed_dim = cfg.hidden_size
        self._mean = torch.tensor((0.485, 0.456, 0.406)).view(1, 3, 1, 1)
        self._std = torch.tensor((0.229, 0.224, 0.225)).view(1, 3, 1, 1)

    def features(self, x):
        x = self.check_input(x)
        out = self.model(pixel_values=(x.float() - self._mean) / self._std)
        pooled = getattr(out, "pooler_output", None)
        if pooled is None:
            pooled = out.last_hidden_state[:, 0]
        return pooled.double()

    def project(self, feats):
        return l2_normalize(feats)


def load_external_bundle(model_id: str, cache_dir=None, client=None) -> EncoderBundle:
    """Resolve ``model_id`` through the cache and wrap it as a bundle.

    The bundle id is ``<model_id>@<digest prefix>``.
    """
    weights, manifest = ModelCache(cache_dir, client).resolve(model_id)
    bundle_id = f"{model_id}@{manifest['digest'][:12]}"
    cfg = json.loads((weights / "config.json").read_text()) if (weights / "config.json").is_file() else {}
    if cfg.get("model_type") == "clip":
        return ClipBundle(weights, bundle_id)
    return VisionOnlyBundle(weights, bundle_id)
