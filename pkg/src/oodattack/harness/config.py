"""Campaign configuration and its canonical snapshot."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from ..attacks import AttackSpec, Objective, parse_fraction
from ..detect import DetectorConfig
from ..errors import ConfigError
from ..zoo.data import ToyWorldSpec

HEAD_SCHEMES = ("zeroshot", "probe", "knn")
MODES = ("attack", "clean")


def fraction_text(value) -> str:
    """Exact text form of a budget: ``"16/255"`` stays a fraction, decimals stay decimals."""
    if isinstance(value, str):
        text = value.strip()
        parse_fraction(text)
        if text.lower() == "unconstrained":
            return "unconstrained"
        if "/" in text:
            f = Fraction(text)
            return f"{f.numerator}/{f.denominator}" if f.denominator != 1 else str(f.numerator)
        return text
    return repr(float(value))


@dataclass(frozen=True)
class TaskSpec:
    """Either the built-in toy world or a ``<split>/<class>/*.png`` directory tree."""

    kind: str = "toy"
    world: ToyWorldSpec = field(default_factory=ToyWorldSpec)
    seed: int = 0
    path: str | None = None
    image_size: int | None = None  # directory tasks: resize target; None uses the first pool model
    ood_paths: tuple = ()

    def __post_init__(self):
        if self.kind not in ("toy", "dir"):
            raise ConfigError(f"unknown task kind {self.kind!r}", module="harness", key="task.kind")
        if self.kind == "dir" and not self.path:
            raise ConfigError("directory task needs a path", module="harness", key="task.path")
        object.__setattr__(self, "ood_paths", tuple(str(p) for p in self.ood_paths))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": int(self.seed)}
        if self.kind == "toy":
            d["world"] = self.world.to_dict()
        else:
            d.update({"path": str(self.path), "image_size": self.image_size, "ood_paths": list(self.ood_paths)})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        world = ToyWorldSpec.from_dict(d.pop("world")) if "world" in d else ToyWorldSpec()
        return cls(world=world, ood_paths=tuple(d.pop("ood_paths", ())), **d)


@dataclass(frozen=True)
class CampaignConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model_pool: tuple = ("toy-a", "toy-b", "toy-c")
    whitebox_ids: tuple = ("toy-a",)
    head_scheme: str = "zeroshot"
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    num_distals: int = 100
    output_dir: str | None = None
    mode: str = "attack"
    epsilon_text: str | None = None  # exact budget as written; "0" marks a sweep's unattacked reference
    di_auto: bool = True  # no DI keys -> the 170..224 policy rescaled to the input size
    chunk_size: int = 20
    knn_k: int = 5
    knn_metric: str = "euclidean"
    probe_l2: float | None = None
    probe_max_iter: int = 1000
    cache_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "model_pool", tuple(self.model_pool))
        object.__setattr__(self, "whitebox_ids", tuple(self.whitebox_ids))
        if not self.model_pool:
            raise ConfigError("model_pool is empty", module="harness", key="model_pool")
        if len(set(self.model_pool)) != len(self.model_pool):
            raise ConfigError("model_pool has duplicate ids", module="harness", key="model_pool")
        if self.head_scheme not in HEAD_SCHEMES:
            raise ConfigError(f"head_scheme must be one of {HEAD_SCHEMES}, got {self.head_scheme!r}",
                              module="harness", key="head_scheme")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}", module="harness", key="mode")
        if self.mode == "attack":
            if not self.whitebox_ids:
                raise ConfigError("whitebox_ids is empty", module="harness", key="whitebox_ids")
            missing = [m for m in self.whitebox_ids if m not in self.model_pool]
            if missing:
                raise ConfigError(f"whitebox ids {missing} are not in model_pool", module="harness", key="whitebox_ids")
        if self.num_distals < 1:
            raise ConfigError("num_distals must be positive", module="harness", key="num_distals")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive", module="harness", key="chunk_size")
        if self.detector.kind.value == "MCM" and self.head_scheme != "zeroshot":
            raise ConfigError("the MCM detector needs the zeroshot head; use MSP for probe/knn",
                              module="harness", key="detector.kind")
        if self.knn_metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown kNN metric {self.knn_metric!r}", module="harness", key="heads.knn_metric")
        eps = None if self.epsilon_text is None else parse_fraction(self.epsilon_text)
        if eps is not None and eps != 0.0 and abs(eps - self.attack.epsilon) > 1e-15:
            raise ConfigError("epsilon_text disagrees with attack.epsilon", module="harness", key="attack.epsilon")

    @property
    def objective(self) -> Objective:
        return self.attack.objective

    def with_epsilon(self, eps) -> "CampaignConfig":
        value = parse_fraction(eps)
        return replace(self, attack=replace(self.attack, epsilon=value), epsilon_text=fraction_text(eps))

    def to_dict(self) -> dict:
        attack = self.attack.to_flat()
        if self.epsilon_text is not None:
            attack["epsilon_text"] = self.epsilon_text
        return {
            "task": self.task.to_dict(),
            "model_pool": list(self.model_pool),
            "whitebox_ids": list(self.whitebox_ids),
            "head_scheme": self.head_scheme,
            "detector": {"kind": self.detector.kind.value, "temperature": self.detector.temperature},
            "attack": attack,
            "num_distals": int(self.num_distals),
            "output_dir": self.output_dir,
            "mode": self.mode,
            "di_auto": self.di_auto,
            "chunk_size": int(self.chunk_size),
            "heads": {"knn_k": self.knn_k, "knn_metric": self.knn_metric, "probe_l2": self.probe_l2,
                      "probe_max_iter": self.probe_max_iter},
            "cache_dir": self.cache_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        attack = dict(d.get("attack", {}))
        eps_text = attack.pop("epsilon_text", None)
        heads = d.get("heads", {})
        det = d.get("detector", {})
        return cls(
            task=TaskSpec.from_dict(d.get("task", {})),
            model_pool=tuple(d.get("model_pool", ("toy-a", "toy-b", "toy-c"))),
            whitebox_ids=tuple(d.get("whitebox_ids", ("toy-a",))),
            head_scheme=d.get("head_scheme", "zeroshot"),
            detector=DetectorConfig(det.get("kind", "MCM"), float(det.get("temperature", 1.0))),
            attack=AttackSpec.from_flat(attack),
            num_distals=int(d.get("num_distals", 100)),
            output_dir=d.get("output_dir"),
            mode=d.get("mode", "attack"),
            epsilon_text=eps_text,
            di_auto=bool(d.get("di_auto", True)),
            chunk_size=int(d.get("chunk_size", 20)),
            knn_k=int(heads.get("knn_k", 5)),
            knn_metric=heads.get("knn_metric", "euclidean"),
            probe_l2=heads.get("probe_l2"),
            probe_max_iter=int(heads.get("probe_max_iter", 1000)),
            cache_dir=d.get("cache_dir"),
        )

    def digest(self) -> str:
        return snapshot_digest(self.to_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def snapshot_digest(snapshot: dict) -> str:
    return hashlib.sha256(canonical_json(snapshot).encode()).hexdigest()


def output_path(config: CampaignConfig) -> Path:
    if not config.output_dir:
        raise ConfigError("output_dir is not set", module="harness", key="campaign.output_dir")
    return Path(config.output_dir)
