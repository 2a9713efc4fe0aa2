"""Classification heads over frozen features.

All heads break ties toward the lowest class index (zero-shot, probe) or the
lowest bank index (kNN neighbor selection).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

HEAD_SCHEMA_VERSION = 1


def fingerprint(features, labels) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(features, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ZeroShotHead:
    prototypes: np.ndarray
    class_names: tuple
    temperature: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != len(self.class_names):
            raise ValidationError("one prototype row per class required", module="heads", key="prototypes")
        if np.abs(np.linalg.norm(p, axis=1) - 1.0).max() > 1e-6:
            raise ValidationError("prototype rows must be unit norm", module="heads", key="prototypes")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive", module="heads", key="temperature")
        object.__setattr__(self, "prototypes", p)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.prototypes.tobytes()).hexdigest()[:16]


def zeroshot_predict(head: ZeroShotHead, projected):
    """Return ``(class, sims)``; batched input gives arrays."""
    v = np.asarray(projected, dtype=np.float64)
    sims = v @ head.prototypes.T
    # np.argmax returns the first maximal index
    return np.argmax(sims, axis=-1), sims


@dataclass(frozen=True, eq=False)
class LinearProbeHead:
    weights: np.ndarray
    bias: np.ndarray
    l2_strength: float
    trained_on: str
    converged: bool = True
    grad_norm: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def fingerprint(self) -> str:
        return self.trained_on


def _probe_objective(theta, X, Y, l2, K, F):
    W = theta[: K * F].reshape(K, F)
    b = theta[K * F:]
    logits = X @ W.T + b
    logp = log_softmax(logits, axis=1)
    n = X.shape[0]
    loss = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
    resid = (np.exp(logp) - Y) / n
    gW = resid.T @ X + l2 * W
    gb = resid.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def probe_objective_grad(head: LinearProbeHead, features, labels):
    """Gradient of the training objective at the head's parameters."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    K, F = head.weights.shape
    Y = np.eye(K)[y]
    theta = np.concatenate([head.weights.ravel(), head.bias])
    return _probe_objective(theta, X, Y, head.l2_strength, K, F)[1]


def fit_linear_probe(features, labels, l2_strength: float | None = None, max_iter: int = 1000,
                     num_classes: int | None = None, tol: float = 1e-6) -> LinearProbeHead:
    """Multinomial logistic regression: mean cross-entropy + (l2/2)||W||^2.

    The bias is unregularized. L-BFGS runs from zero until the gradient
    2-norm drops below ``tol`` or ``max_iter`` is hit; non-convergence is logged
    and recorded on the head.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("features must be N x F with one label per row", module="heads", key="features")
    K = int(num_classes if num_classes is not None else y.max() + 1)
    if np.unique(y).size < 2:
        raise ValidationError("linear probe needs at least two classes", module="heads", key="labels")
    if X.shape[0] < K:
        raise ValidationError("need at least as many samples as classes", module="heads", key="features")
    n, F = X.shape
    l2 = 1.0 / n if l2_strength is None else float(l2_strength)
    Y = np.eye(K)[y]
    theta = np.zeros(K * F + K)
    iters_left = max_iter
    gnorm = np.inf
    # restart L-BFGS a few times: its stopping rule is not the 2-norm we promise
    while iters_left > 0:
        res = minimize(_probe_objective, theta, args=(X, Y, l2, K, F), jac=True, method="L-BFGS-B",
                       options={"maxiter": iters_left, "gtol": tol / 10, "ftol": 0.0, "maxcor": 30})
        theta = res.x
        iters_left -= max(res.nit, 1)
        gnorm = float(np.linalg.norm(_probe_objective(theta, X, Y, l2, K, F)[1]))
        if gnorm < tol or res.nit == 0:
            break
    converged = gnorm < tol
    if not converged:
        log.warning("linear probe did not reach gradient norm %.1e (got %.2e)", tol, gnorm)
    return LinearProbeHead(theta[: K * F].reshape(K, F).copy(), theta[K * F:].copy(), l2,
                           fingerprint(X, y), converged, gnorm)


def probe_predict_proba(head: LinearProbeHead, features):
    f = np.asarray(features, dtype=np.float64)
    return softmax(f @ head.weights.T + head.bias, axis=-1)


@dataclass(frozen=True, eq=False)
class KnnHead:
    bank: np.ndarray
    labels: np.ndarray
    k: int = 5
    metric: str = "euclidean"
    num_classes: int = 0
    trained_on: str = field(default="")

    def __post_init__(self):
        bank = np.asarray(self.bank, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if bank.ndim != 2 or bank.shape[0] == 0:
            raise ValidationError("kNN bank is empty", module="heads", key="bank")
        if labels.shape != (bank.shape[0],):
            raise ValidationError("one label per bank row required", module="heads", key="labels")
        if not np.isfinite(bank).all():
            raise ValidationError("kNN bank rows must be finite", module="heads", key="bank")
        if not 1 <= self.k <= bank.shape[0]:
            raise ConfigError(f"k={self.k} must lie in [1, N={bank.shape[0]}]", module="heads", key="k")
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown kNN metric {self.metric!r}", module="heads", key="metric")
        object.__setattr__(self, "bank", bank)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes or labels.max() + 1))
        if not self.trained_on:
            object.__setattr__(self, "trained_on", fingerprint(bank, labels))

    @property
    def fingerprint(self) -> str:
        return self.trained_on


def knn_distances(head: KnnHead, q: np.ndarray) -> np.ndarray:
    if head.metric == "euclidean":
        return np.sqrt(((head.bank - q) ** 2).sum(axis=1))
    bn = np.linalg.norm(head.bank, axis=1)
    qn = np.linalg.norm(q)
    denom = np.maximum(bn * qn, 1e-12)
    return 1.0 - (head.bank @ q) / denom


def knn_predict_proba(head: KnnHead, features):
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    out = np.zeros((1 if single else f.shape[0], head.num_classes))
    for i, q in enumerate(np.atleast_2d(f)):
        order = np.argsort(knn_distances(head, q), kind="stable")[: head.k]
        np.add.at(out[i], head.labels[order], 1.0)
    out /= head.k
    return out[0] if single else out


def fit_knn(features, labels, k: int = 5, metric: str = "euclidean", num_classes: int | None = None) -> KnnHead:
    return KnnHead(np.asarray(features, dtype=np.float64), np.asarray(labels), k, metric, num_classes or 0)


def predict_proba(head, features):
    if isinstance(head, LinearProbeHead):
        return probe_predict_proba(head, features)
    if isinstance(head, KnnHead):
        return knn_predict_proba(head, features)
    raise ConfigError(f"{type(head).__name__} has no probability output", module="heads", key="head_scheme")


# --------------------------------------------------------------------------- persistence


def save_head(head, directory) -> Path:
    """Write ``manifest.json`` plus ``params.npz``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(head, ZeroShotHead):
        manifest = {"kind": "zeroshot", "temperature": head.temperature, "class_names": list(head.class_names)}
        arrays = {"prototypes": head.prototypes}
    elif isinstance(head, LinearProbeHead):
        manifest = {"kind": "probe", "l2_strength": head.l2_strength, "converged": head.converged,
                    "grad_norm": head.grad_norm}
        arrays = {"weights": head.weights, "bias": head.bias}
    elif isinstance(head, KnnHead):
        manifest = {"kind": "knn", "k": head.k, "metric": head.metric, "num_classes": head.num_classes}
        arrays = {"bank": head.bank, "labels": head.labels}
    else:
        raise ConfigError(f"cannot serialize {type(head).__name__}", module="heads", key="head_scheme")
    manifest.update({"schema_version": HEAD_SCHEMA_VERSION, "fingerprint": head.fingerprint})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    np.savez(d / "params.npz", **arrays)
    return d


def load_head(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("schema_version") != HEAD_SCHEMA_VERSION:
        raise ValidationError(f"head schema {manifest.get('schema_version')} != {HEAD_SCHEMA_VERSION}",
                              module="heads", key="schema_version")
    with np.load(d / "params.npz") as z:
        arrays = {k: z[k] for k in z.files}
    kind = manifest["kind"]
    if kind == "zeroshot":
        return ZeroShotHead(arrays["prototypes"], tuple(manifest["class_names"]), manifest["temperature"])
    if kind == "probe":
        return LinearProbeHead(arrays["weights"], arrays["bias"], manifest["l2_strength"], manifest["fingerprint"],
                               manifest["converged"], manifest["grad_norm"])
    return KnnHead(arrays["bank"], arrays["labels"], manifest["k"], manifest["metric"], manifest["num_classes"],
                   manifest["fingerprint"])
