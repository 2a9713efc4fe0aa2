"""Campaign runner: clean/adversarial evaluation over a model pool.

Work is cut into fixed-size sample chunks before it is handed to the thread
pool, and results are reassembled in chunk order, so the output does not
depend on the worker count. Torch intra-op threading is pinned to one thread
for the duration of a campaign for the same reason.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.special import softmax

from ..attacks import AttackSpec, DiversePolicy, Objective, make_distal_seed, parse_fraction, run_attack, target_embeddings
from ..detect import DetectorKind, mcm_score, msp_score, tpr95_threshold
from ..errors import ConfigError, OodAttackError
from ..heads import ZeroShotHead, fit_knn, fit_linear_probe, predict_proba, zeroshot_predict
from ..metrics import MetricRow, accuracy, auroc, fnr_at_threshold, fpr_at_threshold, targeted_success
from ..zoo.bundle import format_prompt
from ..zoo.data import ToyWorldSpec
from .config import CampaignConfig, fraction_text
from .report import BLACKBOX_AVG, NOISE_AVG, ReportBundle, ScoreRecord, TransferRow
from .sources import TaskData, fit_input, load_task, resolve_bundle

log = logging.getLogger(__name__)

NO_ATTACK_DIGEST = "none:eps=0"


@contextlib.contextmanager
def _single_threaded_torch():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class Scored:
    """Scores of one image set on one model."""

    scores: np.ndarray
    predicted: np.ndarray  # class index


@dataclass
class _Model:
    id: str
    bundle: object
    head: object
    fingerprint: str


@dataclass
class ImageSet:
    provenance: str
    images: torch.Tensor
    sample_ids: list
    truth: list  # true class name, OOD label, or target class name
    truth_index: np.ndarray  # -1 when not an ID class
    digest: str | None
    scored: dict = field(default_factory=dict)  # model id -> Scored


class Campaign:
    """Holds the loaded pool, heads and clean scores so sweeps can reuse them."""

    def __init__(self, config: CampaignConfig, workers: int = 1):
        if workers < 1:
            raise ConfigError("workers must be positive", module="harness", key="workers")
        self.config = config
        self.workers = int(workers)
        self.world = config.task.world if config.task.kind == "toy" else ToyWorldSpec()
        self.failures: dict = {}
        self.models: dict = {}
        self.data: TaskData | None = None
        self.clean: ImageSet | None = None
        self.natural: ImageSet | None = None
        self._prepared = False

    # ------------------------------------------------------------------ setup

    def _load_bundles(self):
        cfg = self.config
        bundles = {}
        for mid in cfg.model_pool:
            try:
                bundles[mid] = resolve_bundle(mid, self.world, cfg.cache_dir)
            except ConfigError:
                raise
            except Exception as e:  # noqa: BLE001 - any load failure degrades the campaign
                log.warning("model %s failed to load: %s", mid, e)
                self.failures[mid] = f"load failed: {e}"
        if cfg.mode == "attack":
            lost = [m for m in cfg.whitebox_ids if m not in bundles]
            if lost:
                raise ConfigError(f"whitebox models {lost} failed to load: "
                                  + "; ".join(self.failures[m] for m in lost), module="harness", key="whitebox_ids")
        if cfg.head_scheme == "zeroshot":
            no_text = [m for m, b in bundles.items() if not b.has_text_tower]
            if no_text:
                raise ConfigError(f"zeroshot head needs a text tower; {no_text} have none", module="harness",
                                  key="head_scheme")
        if not bundles:
            raise ConfigError("no pool model could be loaded", module="harness", key="model_pool")
        return bundles

    def _build_head(self, bundle):
        cfg = self.config
        names = self.data.class_names
        if cfg.head_scheme == "zeroshot":
            with torch.no_grad():
                protos = torch.stack([bundle.encode_text(format_prompt(c)) for c in names]).numpy()
            head = ZeroShotHead(protos, tuple(names), cfg.detector.temperature)
            return head, head.fingerprint
        feats = self._features(bundle, self.data.train.images)
        labels = self.data.train.class_index
        if cfg.head_scheme == "probe":
            head = fit_linear_probe(feats, labels, cfg.probe_l2, cfg.probe_max_iter, num_classes=len(names))
        else:
            head = fit_knn(feats, labels, cfg.knn_k, cfg.knn_metric, num_classes=len(names))
        return head, head.fingerprint

    def _features(self, bundle, images):
        out = []
        cs = self.config.chunk_size
        with torch.no_grad():
            for i in range(0, images.shape[0], cs):
                out.append(bundle.features(fit_input(bundle, images[i:i + cs])).numpy())
        return np.concatenate(out)

    def prepare(self):
        if self._prepared:
            return self
        cfg = self.config
        bundles = self._load_bundles()
        size = None
        if cfg.mode == "attack":
            size = bundles[cfg.whitebox_ids[0]].input_shape[-1]
        self.data = load_task(cfg.task, size or next(iter(bundles.values())).input_shape[-1])
        if cfg.mode == "attack" and self.data.test.images.shape[0] == 0:
            raise ConfigError("test split is empty", module="harness", key="task")
        with _single_threaded_torch():
            for mid, b in bundles.items():
                try:
                    head, fp = self._build_head(b)
                except Exception as e:  # noqa: BLE001
                    if cfg.mode == "attack" and mid in cfg.whitebox_ids:
                        raise
                    log.warning("head for %s failed: %s", mid, e)
                    self.failures[mid] = f"head failed: {e}"
                    continue
                self.models[mid] = _Model(mid, b, head, fp)
            test = self.data.test
            n = test.images.shape[0]
            self.clean = ImageSet("cleanID", test.images, [f"id-{i:05d}" for i in range(n)], list(test.labels),
                                  test.class_index, None)
            self.score(self.clean)
            if self.data.ood is not None:
                ood = self.data.ood
                self.natural = ImageSet("naturalOOD", ood.images, [f"ood-{i:05d}" for i in range(ood.images.shape[0])],
                                        list(ood.labels), ood.class_index, None)
                self.score(self.natural)
        self._prepared = True
        return self

    # ------------------------------------------------------------------ scoring

    def _eval_chunk(self, model: _Model, x: torch.Tensor) -> Scored:
        cfg = self.config
        b = model.bundle
        with torch.no_grad():
            x = fit_input(b, x)
            if cfg.head_scheme == "zeroshot":
                pred, sims = zeroshot_predict(model.head, b.embed(x).numpy())
                if cfg.detector.kind is DetectorKind.MCM:
                    s = mcm_score(sims, cfg.detector.temperature)
                else:
                    s = msp_score(softmax(sims / cfg.detector.temperature, axis=-1))
                return Scored(np.atleast_1d(s), np.atleast_1d(pred))
            proba = predict_proba(model.head, b.features(x).numpy())
        return Scored(np.atleast_1d(msp_score(proba)), np.argmax(proba, axis=-1))

    def _map(self, fn, items):
        if self.workers == 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _chunks(self, n: int) -> list:
        cs = self.config.chunk_size
        return [list(range(i, min(i + cs, n))) for i in range(0, n, cs)]

    def score(self, imgset: ImageSet) -> ImageSet:
        """Score ``imgset`` on every live model; scoring failures drop that model."""
        chunks = self._chunks(imgset.images.shape[0])
        live = list(self.models.values())
        jobs = [(m, ch) for m in live for ch in chunks]

        def run(job):
            m, ch = job
            try:
                return self._eval_chunk(m, imgset.images[ch])
            except OodAttackError as e:
                return e
            except RuntimeError as e:
                return e

        parallel = all(getattr(m.bundle, "thread_safe", False) for m in live)
        results = self._map(run, jobs) if parallel else [run(j) for j in jobs]
        for k, m in enumerate(live):
            parts = results[k * len(chunks):(k + 1) * len(chunks)]
            errs = [p for p in parts if isinstance(p, Exception)]
            if errs:
                if self.config.mode == "attack" and m.id in self.config.whitebox_ids:
                    raise errs[0]
                log.warning("model %s failed while scoring %s: %s", m.id, imgset.provenance, errs[0])
                self.failures[m.id] = f"scoring failed: {errs[0]}"
                self.models.pop(m.id)
                for other in (self.clean, self.natural, imgset):
                    if other is not None:
                        other.scored.pop(m.id, None)
                continue
            imgset.scored[m.id] = Scored(np.concatenate([p.scores for p in parts]),
                                         np.concatenate([p.predicted for p in parts]))
        return imgset

    # ------------------------------------------------------------------ attacks

    def resolved_attack(self, spec: AttackSpec | None = None) -> AttackSpec:
        spec = spec or self.config.attack
        if spec.di_policy is None and self.config.di_auto:
            size = self.models[self.config.whitebox_ids[0]].bundle.input_shape[-1]
            spec = replace(spec, di_policy=DiversePolicy.scaled_to(size))
        return spec

    def _whitebox(self):
        return [self.models[m].bundle for m in self.config.whitebox_ids]

    def _run_chunked(self, x0: torch.Tensor, spec: AttackSpec, targets=None) -> torch.Tensor:
        wb = self._whitebox()
        for b in wb:
            if tuple(b.input_shape) != tuple(x0.shape[1:]):
                raise ConfigError(f"whitebox {b.id} expects {b.input_shape}, task images are {tuple(x0.shape[1:])}; "
                                  "set task.image_size", module="harness", key="task.image_size")

        def job(ch):
            tgt = None if targets is None else [t[ch] for t in targets]
            return run_attack(wb, x0[ch], spec, tgt, sample_indices=ch).x_adv

        chunks = self._chunks(x0.shape[0])
        parallel = all(b.thread_safe for b in wb)
        parts = self._map(job, chunks) if parallel else [job(c) for c in chunks]
        return torch.cat(parts)

    def adversarial_set(self, spec: AttackSpec | None = None) -> ImageSet:
        """One adversarial image per clean test image (ID2OOD)."""
        self.prepare()
        spec = self.resolved_attack(spec)
        if spec.objective is not Objective.ID2OOD_AFS:
            raise ConfigError("adversarial_set needs the ID2OOD_AFS objective", module="harness", key="attack.objective")
        clean = self.clean
        with _single_threaded_torch():
            x_adv = self._run_chunked(clean.images, spec)
            adv = ImageSet("advID", x_adv, [f"adv-{i:05d}" for i in range(len(clean.sample_ids))], clean.truth,
                           clean.truth_index, spec.digest())
            return self.score(adv)

    def unattacked_set(self) -> ImageSet:
        """The epsilon = 0 reference: clean images relabeled as advID."""
        self.prepare()
        clean = self.clean
        s = ImageSet("advID", clean.images, [f"adv-{i:05d}" for i in range(len(clean.sample_ids))], clean.truth,
                     clean.truth_index, NO_ATTACK_DIGEST)
        s.scored = dict(clean.scored)
        return s

    def distal_set(self, spec: AttackSpec | None = None) -> ImageSet:
        """``num_distals`` noise seeds pushed toward round-robin target classes (OOD2ID)."""
        self.prepare()
        spec = self.resolved_attack(spec)
        if spec.objective is not Objective.OOD2ID_TTAFS:
            raise ConfigError("distal_set needs the OOD2ID_TTAFS objective", module="harness", key="attack.objective")
        names = self.data.class_names
        n = self.config.num_distals
        tgt_idx = np.arange(n) % len(names)
        shape = self.models[self.config.whitebox_ids[0]].bundle.input_shape
        x0 = torch.stack([make_distal_seed(shape, spec.seed, i) for i in range(n)])
        with _single_threaded_torch():
            per_member = target_embeddings(self._whitebox(), names)
            targets = [t[torch.from_numpy(tgt_idx)] for t in per_member]
            x_adv = self._run_chunked(x0, spec, targets)
            s = ImageSet("distal", x_adv, [f"distal-{i:05d}" for i in range(n)], [names[k] for k in tgt_idx],
                         tgt_idx, spec.digest())
            return self.score(s)

    def noise_set(self, epsilon) -> ImageSet:
        """Each test image plus uniform noise in [-eps, eps], clipped to the unit box."""
        self.prepare()
        eps = float(epsilon)
        seed = int(self.config.attack.seed)
        clean = self.clean
        noisy = []
        for i in range(clean.images.shape[0]):
            rng = np.random.default_rng([seed, 0x0153, i])
            u = torch.from_numpy(rng.uniform(-1.0, 1.0, tuple(clean.images.shape[1:])))
            noisy.append((clean.images[i] + eps * u).clamp(0.0, 1.0))
        digest = hashlib.sha256(json.dumps({"noise": repr(eps), "seed": seed}).encode()).hexdigest()[:16]
        s = ImageSet("noiseID", torch.stack(noisy), [f"noise-{i:05d}" for i in range(len(noisy))], clean.truth,
                     clean.truth_index, digest)
        with _single_threaded_torch():
            return self.score(s)

    # ------------------------------------------------------------------ assembly

    def records(self, sets) -> list:
        cfg = self.config
        out = []
        order = {p: k for k, p in enumerate(("cleanID", "naturalOOD", "advID", "distal", "noiseID"))}
        sets = sorted([s for s in sets if s is not None], key=lambda s: order[s.provenance])
        names = self.data.class_names
        for mid in cfg.model_pool:
            if mid not in self.models:
                continue
            fp = self.models[mid].fingerprint
            for s in sets:
                sc = s.scored[mid]
                for i, sid in enumerate(s.sample_ids):
                    out.append(ScoreRecord(sid, s.provenance, mid, cfg.head_scheme, float(sc.scores[i]),
                                           names[int(sc.predicted[i])], s.truth[i], s.digest, fp))
        return out

    def report(self, sets, extra_failures=None) -> ReportBundle:
        cfg = self.config
        records = self.records(sets)
        metrics, thresholds = metrics_from_records(records, self.data.class_names, cfg)
        transfer = transfer_rows(metrics, cfg)
        failures = dict(self.failures)
        failures.update(extra_failures or {})
        rep = ReportBundle(cfg.to_dict(), cfg.digest(), records, metrics, transfer, thresholds, failures)
        rep.check_invariants()
        return rep


# --------------------------------------------------------------------------- metrics from records


def _role(model_id: str, provenance: str, cfg: CampaignConfig) -> str:
    if provenance == "noiseID":
        return "noise"
    return "whitebox" if model_id in cfg.whitebox_ids else "blackbox"


def metrics_from_records(records, class_names, cfg: CampaignConfig):
    """Every MetricRow is a function of the records alone (plus the config's roles)."""
    head, det = cfg.head_scheme, cfg.detector.kind.value
    by: dict = {}
    for r in records:
        by.setdefault(r.model_id, {}).setdefault(r.provenance, []).append(r)
    rows, thresholds = [], {}
    for mid in cfg.model_pool:
        if mid not in by:
            continue
        groups = by[mid]
        clean = groups["cleanID"]
        cs = np.array([r.ood_score for r in clean])
        tau = tpr95_threshold(cs)
        thresholds[(mid, head, det)] = tau

        def row(metric, value, n_pos, n_neg=0, threshold=None, digest=None, role=""):
            return MetricRow(metric, float(value), int(n_pos), int(n_neg), threshold, mid, head, det, digest, role)

        rows.append(row("acc", accuracy([r.predicted_class for r in clean], [r.true_or_target_class for r in clean]),
                        len(clean), role="clean"))
        if "naturalOOD" in groups:
            ns = np.array([r.ood_score for r in groups["naturalOOD"]])
            rows.append(row("auroc", auroc(cs, ns), len(cs), len(ns), role="natural"))
            rows.append(row("fpr95", fpr_at_threshold(ns, tau), len(ns), threshold=tau, role="natural"))
        for prov in ("advID", "noiseID"):
            if prov not in groups:
                continue
            g = groups[prov]
            s = np.array([r.ood_score for r in g])
            role = _role(mid, prov, cfg)
            dig = g[0].attack_config_digest
            rows.append(row("acc", accuracy([r.predicted_class for r in g], [r.true_or_target_class for r in g]),
                            len(g), digest=dig, role=role))
            rows.append(row("auroc", auroc(cs, s), len(cs), len(s), digest=dig, role=role))
            rows.append(row("fnr95", fnr_at_threshold(s, tau), len(s), threshold=tau, digest=dig, role=role))
        if "distal" in groups:
            g = groups["distal"]
            s = np.array([r.ood_score for r in g])
            role = _role(mid, "distal", cfg)
            dig = g[0].attack_config_digest
            rows.append(row("tsuc", targeted_success([r.predicted_class for r in g],
                                                     [r.true_or_target_class for r in g]), len(g), digest=dig, role=role))
            rows.append(row("auroc", auroc(cs, s), len(cs), len(s), digest=dig, role=role))
            rows.append(row("fpr95", fpr_at_threshold(s, tau), len(s), threshold=tau, digest=dig, role=role))
    rows += _averages(rows, "blackbox", BLACKBOX_AVG, head, det)
    noise_targets = [r for r in rows if r.role == "noise" and r.model_id not in cfg.whitebox_ids]
    rows += _averages(noise_targets, "noise", NOISE_AVG, head, det)
    return rows, thresholds


def _averages(rows, role, avg_role, head, det):
    """Equal-weight mean per metric over the rows carrying ``role``."""
    out = []
    picked = [r for r in rows if r.role == role]
    for metric in dict.fromkeys(r.metric for r in picked):
        rs = [r for r in picked if r.metric == metric]
        value = float(np.mean([r.value for r in rs]))
        out.append(MetricRow(metric, value, sum(r.n_pos for r in rs), sum(r.n_neg for r in rs), None, avg_role,
                             head, det, rs[0].attack_config_digest, avg_role))
    return out


def transfer_rows(metrics, cfg: CampaignConfig) -> list:
    src = "+".join(cfg.whitebox_ids)
    out = []
    for mid in cfg.model_pool:
        mine = [r for r in metrics if r.model_id == mid and r.role in ("whitebox", "blackbox")]
        if not mine:
            continue
        vals = {r.metric: r.value for r in mine}
        out.append(TransferRow(src, mid, mine[0].role, cfg.head_scheme, cfg.detector.kind.value,
                               vals.get("acc"), vals.get("auroc"), vals.get("fnr95"), vals.get("fpr95"),
                               vals.get("tsuc")))
    return out


# --------------------------------------------------------------------------- public entry points


def run_campaign(config: CampaignConfig, workers: int = 1, campaign: Campaign | None = None) -> ReportBundle:
    """Clean + natural OOD evaluation, plus the configured attack unless ``mode == "clean"``."""
    if campaign is None:
        c = Campaign(config, workers)
    else:
        c = campaign if campaign.config is config else _rebind(campaign, config)
    c.prepare()
    sets = [c.clean, c.natural]
    if config.mode == "attack":
        if config.objective is Objective.ID2OOD_AFS:
            sets.append(c.adversarial_set(config.attack))
        else:
            sets.append(c.distal_set(config.attack))
    return c.report(sets)


def _rebind(campaign: Campaign, config: CampaignConfig) -> Campaign:
    """Share the prepared pool with a config that differs only in its attack."""
    base = campaign.config
    if replace(config, attack=base.attack, epsilon_text=base.epsilon_text) != base:
        raise ConfigError("a shared campaign may only vary the attack settings", module="harness", key="attack")
    clone = Campaign.__new__(Campaign)
    clone.__dict__.update(campaign.__dict__)
    clone.config = config
    return clone


@dataclass
class SweepReport:
    epsilons: list  # exact text form
    reports: list
    series: dict  # model id -> metric -> values, one per epsilon
    examples: dict = field(default_factory=dict)  # epsilon text -> first few adversarial images
    noise: ReportBundle | None = None


def epsilon_sweep(config: CampaignConfig, epsilons, workers: int = 1, num_examples: int = 4,
                  noise_epsilon=None) -> SweepReport:
    """ID2OOD campaigns per budget, sharing one prepared pool and its clean scores.

    ``epsilon = 0`` is the unattacked reference point.
    """
    if config.objective is not Objective.ID2OOD_AFS:
        raise ConfigError("the sweep runs the ID2OOD_AFS objective", module="harness", key="attack.objective")
    texts = [fraction_text(e) for e in epsilons]
    values = [parse_fraction(t) for t in texts]
    if not values:
        raise ConfigError("no epsilons given", module="harness", key="sweep.epsilons")
    if any(b < a for a, b in zip(values, values[1:])) or values[0] < 0:
        raise ConfigError("epsilons must be nonnegative and ascending", module="harness", key="sweep.epsilons")
    base = Campaign(config, workers).prepare()
    reports, examples = [], {}
    for text, eps in zip(texts, values):
        if eps == 0.0:
            cfg = replace(config, epsilon_text=text)
            c = _rebind(base, cfg)
            adv = c.unattacked_set()
        else:
            cfg = config.with_epsilon(text)
            c = _rebind(base, cfg)
            adv = c.adversarial_set(cfg.attack)
        examples[text] = adv.images[:num_examples].clone()
        reports.append(c.report([c.clean, c.natural, adv]))
    series: dict = {}
    for rep in reports:
        for r in rep.metrics:
            if r.role in ("whitebox", "blackbox", BLACKBOX_AVG):
                series.setdefault(r.model_id, {}).setdefault(r.metric, []).append(r.value)
    noise = None
    if noise_epsilon is not None:
        noise = noise_baseline(config, noise_epsilon, workers, campaign=base)
    return SweepReport(texts, reports, series, examples, noise)


def noise_baseline(config: CampaignConfig, epsilon, workers: int = 1, campaign: Campaign | None = None) -> ReportBundle:
    """Uniform-noise reference scored exactly like advID; rows carry role ``noise``."""
    c = campaign if campaign is not None else Campaign(config, workers)
    c.prepare()
    eps = parse_fraction(fraction_text(epsilon))
    if eps < 0:
        raise ConfigError("noise epsilon must be nonnegative", module="harness", key="epsilon")
    noisy = c.noise_set(eps)
    return c.report([c.clean, c.natural, noisy])


def transfer_matrix(config: CampaignConfig, sources, workers: int = 1) -> list:
    """Transfer rows for several whitebox sets over one shared pool."""
    base = Campaign(replace(config, whitebox_ids=tuple(sources[0])), workers).prepare()
    out = []
    for src in sources:
        cfg = replace(config, whitebox_ids=tuple(src))
        c = Campaign(cfg, workers)
        c.__dict__.update({k: v for k, v in base.__dict__.items() if k != "config"})
        out += run_campaign(cfg, campaign=c).transfer
    return out
