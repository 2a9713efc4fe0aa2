"""Feature-space attacks on frozen encoders.

Two objectives share one optimizer:

* ``ID2OOD_AFS`` minimizes the cosine similarity between the backbone
  features of the perturbed image and those of the clean start image.
* ``OOD2ID_TTAFS`` maximizes alignment of the projected image embedding with
  a target class's text embedding while penalizing (weight ``lambda_afs``)
  alignment with the start image's projected embedding.

The optimizer is an l-infinity PGD loop with input diversity, translation
invariant gradient smoothing, L1-normalized momentum and loss-level ensembling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateVectorError, NumericError, UnsupportedBundleError
from .zoo.bundle import NORM_EPS, EncoderBundle, as_batch

log = logging.getLogger(__name__)


class Objective(str, Enum):
    ID2OOD_AFS = "ID2OOD_AFS"
    OOD2ID_TTAFS = "OOD2ID_TTAFS"


@dataclass(frozen=True)
class DiversePolicy:
    min_size: int = 170
    max_size: int = 224
    transform_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError("need 0 < min_size <= max_size", module="attack-core", key="di.min_size")
        if not 0.0 <= self.transform_prob <= 1.0:
            raise ConfigError("transform_prob must lie in [0, 1]", module="attack-core", key="di.prob")

    @classmethod
    def scaled_to(cls, size: int, transform_prob: float = 0.5) -> "DiversePolicy":
        """The 170..224 policy rescaled to a ``size``-pixel input."""
        return cls(max(1, round(size * 170 / 224)), size, transform_prob)


@dataclass(frozen=True, eq=False)
class TiKernel:
    size: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"TI kernel size must be odd and positive, got {self.size}", module="attack-core", key="ti.size")
        if w.shape != (self.size, self.size) or (w < 0).any():
            raise ConfigError("TI kernel weights must be a nonnegative size x size matrix", module="attack-core", key="ti.size")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("TI kernel weights must sum to 1", module="attack-core", key="ti.size")
        if not np.allclose(w, w[::-1, ::-1], atol=1e-12):
            raise ConfigError("TI kernel must be symmetric under 180 degree rotation", module="attack-core", key="ti.size")
        object.__setattr__(self, "weights", w)

    def __eq__(self, other):
        return isinstance(other, TiKernel) and self.size == other.size and np.array_equal(self.weights, other.weights)

    @classmethod
    def gaussian(cls, size: int = 5, sigma: float | None = None) -> "TiKernel":
        if size < 1 or size % 2 == 0:
            raise ConfigError(f"TI kernel size must be odd and positive, got {size}", module="attack-core", key="ti.size")
        sigma = sigma if sigma is not None else size / 3
        r = np.arange(size) - size // 2
        g = np.exp(-(r**2) / (2 * sigma**2))
        w = np.outer(g, g)
        return cls(size, w / w.sum())

    @classmethod
    def uniform(cls, size: int) -> "TiKernel":
        if size < 1 or size % 2 == 0:
            raise ConfigError(f"TI kernel size must be odd and positive, got {size}", module="attack-core", key="ti.size")
        return cls(size, np.full((size, size), 1.0 / size**2))


UNCONSTRAINED = "unconstrained"


def parse_fraction(value) -> float:
    """Accept ``16/255``, ``"0.0627"``, a number, or ``"unconstrained"`` (the whole unit box)."""
    if isinstance(value, (int, float)):
        return float(value)
    if str(value).strip().lower() == UNCONSTRAINED:
        return 1.0
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"cannot parse {value!r} as a number or fraction", module="attack-core", key="epsilon") from e


@dataclass(frozen=True)
class AttackSpec:
    objective: Objective = Objective.ID2OOD_AFS
    epsilon: float = 16 / 255
    steps: int = 20
    step_size: float | None = None  # None -> epsilon / steps
    momentum_mu: float = 1.0
    di_policy: DiversePolicy | None = None
    ti_kernel: TiKernel | None = None
    lambda_afs: float = 0.25
    ensemble_weights: tuple | None = None  # None -> uniform
    seed: int = 0
    # AFS only: its gradient vanishes at x0, so start from a seeded jitter of this fraction of epsilon
    start_jitter: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1], got {self.epsilon}", module="attack-core", key="epsilon")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigError("steps must be a nonnegative integer", module="attack-core", key="steps")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step_size must be positive", module="attack-core", key="step_size")
        if self.momentum_mu < 0:
            raise ConfigError("momentum_mu must be nonnegative", module="attack-core", key="momentum_mu")
        if self.lambda_afs < 0:
            raise ConfigError("lambda must be nonnegative", module="attack-core", key="lambda")
        if not 0.0 <= self.start_jitter <= 1.0:
            raise ConfigError("start_jitter must lie in [0, 1]", module="attack-core", key="start_jitter")
        if self.ensemble_weights is not None:
            w = tuple(float(v) for v in self.ensemble_weights)
            if not w or any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError("ensemble weights must be nonnegative and sum to 1", module="attack-core", key="ensemble")
            object.__setattr__(self, "ensemble_weights", w)

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return self.epsilon / max(self.steps, 1)

    @property
    def direction(self) -> str:
        return "descend" if self.objective is Objective.ID2OOD_AFS else "ascend"

    def weights_for(self, n: int) -> tuple:
        if n == 0:
            raise ConfigError("empty ensemble", module="attack-core", key="ensemble")
        if self.ensemble_weights is None:
            return tuple([1.0 / n] * n)
        if len(self.ensemble_weights) != n:
            raise ConfigError(
                f"{len(self.ensemble_weights)} ensemble weights for {n} models", module="attack-core", key="ensemble"
            )
        return self.ensemble_weights

    def to_flat(self) -> dict:
        """Flat key/value form used in config files and snapshots."""
        d = {
            "objective": self.objective.value,
            "epsilon": self.epsilon,
            "steps": int(self.steps),
            "step_size": self.step_size,
            "momentum_mu": self.momentum_mu,
            "lambda": self.lambda_afs,
            "seed": int(self.seed),
            "ensemble_weights": list(self.ensemble_weights) if self.ensemble_weights else None,
            "start_jitter": self.start_jitter,
        }
        if self.di_policy is not None:
            d.update({"di.min_size": self.di_policy.min_size, "di.max_size": self.di_policy.max_size,
                      "di.prob": self.di_policy.transform_prob})
        if self.ti_kernel is not None:
            d["ti.size"] = self.ti_kernel.size
            d["ti.weights"] = self.ti_kernel.weights.tolist()
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "AttackSpec":
        known = {"objective", "epsilon", "steps", "step_size", "momentum_mu", "lambda", "seed", "ensemble_weights",
                 "start_jitter", "di.min_size", "di.max_size", "di.prob", "ti.size", "ti.weights", "ti.kind"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attack keys {sorted(unknown)}", module="attack-core", key=sorted(unknown)[0])
        di = None
        if "di.min_size" in d or "di.max_size" in d:
            di = DiversePolicy(int(d["di.min_size"]), int(d["di.max_size"]), float(d.get("di.prob", 0.5)))
        ti = None
        if d.get("ti.weights") is not None:
            w = np.asarray(d["ti.weights"], dtype=np.float64)
            ti = TiKernel(int(d.get("ti.size", w.shape[0])), w)
        elif d.get("ti.size"):
            ti = TiKernel.uniform(int(d["ti.size"])) if d.get("ti.kind") == "uniform" else TiKernel.gaussian(int(d["ti.size"]))
        step_size = d.get("step_size")
        return cls(
            objective=Objective(d.get("objective", Objective.ID2OOD_AFS.value)),
            epsilon=parse_fraction(d.get("epsilon", 16 / 255)),
            steps=int(d.get("steps", 20)),
            step_size=None if step_size in (None, "") else parse_fraction(step_size),
            momentum_mu=float(d.get("momentum_mu", 1.0)),
            di_policy=di,
            ti_kernel=ti,
            lambda_afs=float(d.get("lambda", 0.25)),
            ensemble_weights=tuple(d["ensemble_weights"]) if d.get("ensemble_weights") else None,
            seed=int(d.get("seed", 0)),
            start_jitter=float(d.get("start_jitter", 1e-3)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PerturbationState:
    x0: torch.Tensor
    x_adv: torch.Tensor
    momentum_buffer: torch.Tensor
    iteration: int = 0

    @classmethod
    def start(cls, x0: torch.Tensor) -> "PerturbationState":
        x0 = x0.detach()
        return cls(x0, x0.clone(), torch.zeros_like(x0), 0)

    def check(self, epsilon: float) -> None:
        dev = (self.x_adv - self.x0).abs().max().item() if self.x0.numel() else 0.0
        assert dev <= epsilon + 1e-6, dev
        assert self.x_adv.min().item() >= 0.0 and self.x_adv.max().item() <= 1.0
        assert self.momentum_buffer.shape == self.x0.shape


@dataclass
class AdvResult:
    x_adv: torch.Tensor
    loss_trace: np.ndarray  # (steps,) or (steps, N): ensemble loss at each iterate before its step
    member_trace: np.ndarray  # (steps, M) or (steps, M, N)
    warnings: list = field(default_factory=list)

    def write_trace_csv(self, path, sample: int = 0) -> None:
        lt = self.loss_trace if self.loss_trace.ndim == 1 else self.loss_trace[:, sample]
        mt = self.member_trace if self.member_trace.ndim == 2 else self.member_trace[:, :, sample]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"] + [f"member_{m}" for m in range(mt.shape[1] if mt.ndim == 2 else 0)])
            for i in range(len(lt)):
                w.writerow([i, repr(float(lt[i]))] + [repr(float(v)) for v in mt[i]])


# --------------------------------------------------------------------------- objectives


def cosine_similarity(u, v):
    """Cosine similarity along the last axis; accepts numpy or torch, batched or not."""
    tu = torch.as_tensor(u, dtype=torch.float64) if not isinstance(u, torch.Tensor) else u
    tv = torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
    if tu.shape[-1] != tv.shape[-1]:
        raise ConfigError(f"dimension mismatch {tu.shape[-1]} vs {tv.shape[-1]}", module="attack-core", key="embed_dim")
    nu, nv = tu.norm(dim=-1), tv.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise DegenerateVectorError("zero-norm vector in cosine similarity", module="attack-core", key="features")
    out = (tu * tv).sum(-1) / (nu.clamp_min(NORM_EPS) * nv.clamp_min(NORM_EPS))
    if not isinstance(u, torch.Tensor) and not isinstance(v, torch.Tensor):
        return float(out) if out.dim() == 0 else out.numpy()
    return out


def _features(bundle: EncoderBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.features(bundle.check_input(x))


def _batched(x):
    single = (x.dim() if isinstance(x, torch.Tensor) else np.ndim(x)) == 3
    return as_batch(x), single


def afs_loss(bundle: EncoderBundle, x0, x_adv, anchor: torch.Tensor | None = None):
    """Cosine similarity between backbone features of ``x_adv`` and ``x0`` (to be minimized).

    ``anchor`` may carry precomputed ``f_v(x0)``, in which case ``x0`` is unused.
    The anchor is always treated as a constant.
    """
    xb, single = _batched(x_adv)
    if anchor is None:
        with torch.no_grad():
            anchor = _features(bundle, as_batch(x0))
    val = cosine_similarity(_features(bundle, xb), anchor.detach())
    return val[0] if single else val


def ttafs_loss(bundle: EncoderBundle, x0, x_adv, target_embedding, lambda_afs: float,
               anchor: torch.Tensor | None = None):
    """cos(p(f(x_adv)), target) - lambda * cos(p(f(x_adv)), p(f(x0))) (to be maximized)."""
    xb, single = _batched(x_adv)
    if anchor is None:
        with torch.no_grad():
            anchor = bundle.project(_features(bundle, as_batch(x0)))
    emb = bundle.project(_features(bundle, xb))
    val = cosine_similarity(emb, torch.as_tensor(target_embedding, dtype=emb.dtype))
    if lambda_afs:
        val = val - lambda_afs * cosine_similarity(emb, anchor.detach())
    return val[0] if single else val


def make_distal_seed(shape, seed: int, index: int = 0) -> torch.Tensor:
    """Uniform noise image in [0, 1]; ``shape`` is (C, H, W) or (N, C, H, W)."""
    rng = np.random.default_rng([int(seed), 0xD15A1, int(index)])
    return torch.from_numpy(rng.random(tuple(shape), dtype=np.float64))


# --------------------------------------------------------------------------- transferability tricks


def di_transform(x: torch.Tensor, policy: DiversePolicy, rng: np.random.Generator) -> torch.Tensor:
    """Random resize-and-pad of a single (C, H, W) image; differentiable in ``x``."""
    size = x.shape[-1]
    if policy.min_size > size:
        raise ConfigError(f"di.min_size {policy.min_size} exceeds input size {size}", module="attack-core", key="di.min_size")
    if policy.max_size > size:
        raise ConfigError(f"di.max_size {policy.max_size} exceeds input size {size}", module="attack-core", key="di.max_size")
    # draw every variate unconditionally so stream consumption is fixed
    u = rng.random()
    s = int(rng.integers(policy.min_size, policy.max_size + 1))
    top = int(rng.integers(0, size - s + 1))
    left = int(rng.integers(0, size - s + 1))
    if u >= policy.transform_prob:
        return x
    if s == size:
        return x
    small = F.interpolate(x.unsqueeze(0), size=(s, s), mode="bilinear", align_corners=False)[0]
    return F.pad(small, (left, size - s - left, top, size - s - top))


def ti_smooth(grad: torch.Tensor, kernel: TiKernel) -> torch.Tensor:
    """Per-channel 2-D convolution with zero padding, shape preserving."""
    single = grad.dim() == 3
    g = grad.unsqueeze(0) if single else grad
    if kernel.size > g.shape[-1] or kernel.size > g.shape[-2]:
        raise ConfigError("TI kernel larger than the gradient", module="attack-core", key="ti.size")
    c = g.shape[1]
    w = torch.as_tensor(kernel.weights, dtype=g.dtype)
    # kernel is 180-degree symmetric, so correlation equals convolution
    w = w.expand(c, 1, kernel.size, kernel.size)
    out = F.conv2d(g, w, padding=kernel.size // 2, groups=c)
    return out[0] if single else out


def _l1(grad: torch.Tensor) -> torch.Tensor:
    if grad.dim() == 4:
        return grad.abs().sum(dim=(1, 2, 3), keepdim=True)
    return grad.abs().sum()


def momentum_update(g_prev: torch.Tensor, grad: torch.Tensor, mu: float) -> torch.Tensor:
    """``mu * g_prev + grad / ||grad||_1``; a zero gradient contributes nothing.

    4-D inputs are normalized per leading (sample) index.
    """
    if g_prev.shape != grad.shape:
        raise ConfigError("momentum buffer and gradient shapes differ", module="attack-core", key="momentum")
    norm = _l1(grad)
    scaled = torch.where(norm > 0, grad / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.zeros_like(grad))
    return mu * g_prev + scaled


def stalled(grad: torch.Tensor) -> torch.Tensor:
    return (_l1(grad) == 0).reshape(-1)


def pgd_step(state: PerturbationState, smoothed_grad: torch.Tensor, spec: AttackSpec, direction: str) -> PerturbationState:
    if direction not in ("ascend", "descend"):
        raise ConfigError(f"direction must be ascend or descend, got {direction!r}", module="attack-core", key="direction")
    sign = 1.0 if direction == "ascend" else -1.0
    raw = state.x_adv + sign * spec.alpha * torch.sign(smoothed_grad)
    lo = (state.x0 - spec.epsilon).clamp(0.0, 1.0)
    hi = (state.x0 + spec.epsilon).clamp(0.0, 1.0)
    x_adv = torch.minimum(torch.maximum(raw, lo), hi)
    return PerturbationState(state.x0, x_adv.detach(), state.momentum_buffer, state.iteration + 1)


def ensemble_loss(bundles: Sequence[EncoderBundle], weights, per_model_losses):
    if not bundles or not per_model_losses:
        raise ConfigError("empty ensemble", module="attack-core", key="ensemble")
    if len(bundles) != len(per_model_losses):
        raise ConfigError("one loss per ensemble member required", module="attack-core", key="ensemble")
    if weights is None:
        weights = [1.0 / len(bundles)] * len(bundles)
    if len(weights) != len(bundles):
        raise ConfigError("one weight per ensemble member required", module="attack-core", key="ensemble")
    total = 0.0
    for w, loss in zip(weights, per_model_losses):
        total = total + w * loss
    return total


# --------------------------------------------------------------------------- driver


def sample_rng(seed: int, sample_index: int, iteration: int, member: int) -> np.random.Generator:
    """Per-(sample, iteration, member) stream; independent of batching and scheduling."""
    return np.random.default_rng([int(seed), int(sample_index), int(iteration), int(member)])


def start_point(x0: torch.Tensor, spec: AttackSpec, sample_indices) -> torch.Tensor:
    """``x0`` plus uniform noise of amplitude ``start_jitter * epsilon``, one stream per sample.

    At ``x_adv = x0`` the AFS gradient is zero up to round-off, so without this
    the first step would follow the sign of floating-point noise.
    """
    amp = spec.start_jitter * spec.epsilon
    if amp == 0.0:
        return x0.clone()
    shape = tuple(x0.shape[1:])
    noise = np.stack([np.random.default_rng([int(spec.seed), int(i), 0x57A27]).uniform(-1.0, 1.0, shape)
                      for i in sample_indices])
    return (x0 + amp * torch.from_numpy(noise)).clamp(0.0, 1.0)


def _per_member_targets(target_embedding, bundles, n):
    if target_embedding is None:
        return None
    if isinstance(target_embedding, (list, tuple)):
        if len(target_embedding) != len(bundles):
            raise ConfigError("one target embedding per ensemble member required", module="attack-core",
                              key="target_embedding")
        targets = list(target_embedding)
    else:
        if len(bundles) != 1:
            raise ConfigError("ensembles need one target embedding per member", module="attack-core",
                              key="target_embedding")
        targets = [target_embedding]
    out = []
    for b, t in zip(bundles, targets):
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.shape[-1] != b.embed_dim:
            raise ConfigError(f"target embedding width {t.shape[-1]} != {b.embed_dim} for {b.id}",
                              module="attack-core", key="target_embedding")
        out.append(t.expand(n, -1) if t.dim() == 1 else t)
    return out


def run_attack(bundles, x0, spec: AttackSpec, target_embedding=None, sample_indices=None) -> AdvResult:
    """Run the configured attack on one image (C, H, W) or a batch (N, C, H, W).

    ``target_embedding`` (TT+AFS only) is one vector per member, either shared
    across the batch (E,) or per sample (N, E). ``sample_indices`` name the
    rows for RNG derivation; the default is ``range(N)``.
    """
    if isinstance(bundles, EncoderBundle):
        bundles = [bundles]
    bundles = list(bundles)
    if not bundles:
        raise ConfigError("empty ensemble", module="attack-core", key="ensemble")
    for b in bundles:
        if not b.differentiable:
            raise UnsupportedBundleError(f"bundle {b.id} is not differentiable", module="attack-core", key="model_pool")
    weights = spec.weights_for(len(bundles))
    single = (x0.dim() if isinstance(x0, torch.Tensor) else np.ndim(x0)) == 3
    x0b = as_batch(x0).detach()
    n = x0b.shape[0]
    idx = list(range(n)) if sample_indices is None else [int(i) for i in sample_indices]
    if len(idx) != n:
        raise ConfigError("sample_indices length must match batch", module="attack-core", key="sample_indices")

    afs = spec.objective is Objective.ID2OOD_AFS
    if afs and target_embedding is not None:
        raise ConfigError("AFS takes no target embedding", module="attack-core", key="target_embedding")
    if not afs and target_embedding is None:
        raise ConfigError("TT+AFS requires a target embedding", module="attack-core", key="target_embedding")
    targets = _per_member_targets(target_embedding, bundles, n)

    with torch.no_grad():
        anchors = []
        for b in bundles:
            f = _features(b, x0b)
            anchors.append(f if afs else b.project(f))

    state = PerturbationState.start(x0b)
    if afs and spec.steps > 0:
        state = replace(state, x_adv=start_point(x0b, spec, idx))
    losses, member_losses, warnings = [], [], []
    for it in range(int(spec.steps)):
        grad = torch.zeros_like(x0b)
        vals = []
        for m, b in enumerate(bundles):
            def member_loss(x, m=m, b=b):
                if spec.di_policy is not None:
                    x = torch.stack([di_transform(x[i], spec.di_policy, sample_rng(spec.seed, idx[i], it, m))
                                     for i in range(n)])
                if afs:
                    return afs_loss(b, None, x, anchor=anchors[m])
                return ttafs_loss(b, None, x, targets[m], spec.lambda_afs, anchor=anchors[m])

            try:
                v, g = b.value_and_grad(member_loss, state.x_adv)
            except NumericError as e:
                e.diagnostics.update({"iteration": it, "member": b.id, "trace": [l.tolist() for l in losses]})
                raise
            vals.append(v)
            grad = grad + weights[m] * g
        total = ensemble_loss(bundles, weights, vals)
        if not torch.isfinite(total).all():
            raise NumericError("nonfinite attack loss", module="attack-core", key="loss",
                               diagnostics={"iteration": it, "trace": [l.tolist() for l in losses]})
        losses.append(total.numpy().copy())
        member_losses.append(torch.stack(vals).numpy().copy())

        if spec.ti_kernel is not None:
            grad = ti_smooth(grad, spec.ti_kernel)
        flat = stalled(grad)
        if flat.any():
            for i in torch.nonzero(flat).flatten().tolist():
                warnings.append({"iteration": it, "sample": idx[i], "warning": "stalled gradient"})
        buf = momentum_update(state.momentum_buffer, grad, spec.momentum_mu)
        state = replace(state, momentum_buffer=buf)
        state = pgd_step(state, buf, spec, spec.direction)

    if warnings:
        log.warning("%d stalled-gradient events during attack", len(warnings))
    loss_trace = np.array(losses).reshape(len(losses), n)
    member_trace = np.array(member_losses).reshape(len(losses), len(bundles), n)
    x_adv = state.x_adv
    if single:
        return AdvResult(x_adv[0], loss_trace[:, 0], member_trace[:, :, 0], warnings)
    return AdvResult(x_adv, loss_trace, member_trace, warnings)


def target_embeddings(bundles: Sequence[EncoderBundle], class_names: Sequence[str]) -> list[torch.Tensor]:
    """Per-member (len(class_names), E) matrices of prompt embeddings."""
    from .zoo.bundle import format_prompt

    out = []
    for b in bundles:
        if not b.has_text_tower:
            raise UnsupportedBundleError(f"bundle {b.id} has no text tower for target embeddings",
                                         module="attack-core", key="target_embedding")
        with torch.no_grad():
            out.append(torch.stack([b.encode_text(format_prompt(c)) for c in class_names]))
    return out


def within_budget(x_adv: torch.Tensor, x0: torch.Tensor, epsilon: float, tol: float = 1e-6) -> bool:
    return bool((x_adv - x0).abs().max().item() <= epsilon + tol and x_adv.min() >= 0 and x_adv.max() <= 1)


__all__ = [
    "AdvResult", "AttackSpec", "DiversePolicy", "Objective", "PerturbationState", "TiKernel",
    "afs_loss", "cosine_similarity", "di_transform", "ensemble_loss", "make_distal_seed",
    "momentum_update", "parse_fraction", "pgd_step", "run_attack", "target_embeddings", "ti_smooth",
    "ttafs_loss", "within_budget",
]
