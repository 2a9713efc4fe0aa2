"""Campaign results and their on-disk form.

Directory layout written by :func:`write_report`::

    config.snapshot       JSON: schema_version, digest, config
    records.ndjson        one ScoreRecord per line
    metrics.csv           MetricRow table
    transfer_matrix.csv   one row per (whitebox set, target model)
    thresholds.csv        tau per (model, head, detector)
    failures.json         models that failed to load or score

Floats are written with ``repr`` so a round trip is bit-exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import IntegrityError, MigrationError, NotFoundError, ValidationError
from ..metrics import MetricRow
from .config import snapshot_digest

SCHEMA_VERSION = 1

PROVENANCES = ("cleanID", "naturalOOD", "advID", "distal", "noiseID")
BLACKBOX_AVG = "blackbox_avg"
NOISE_AVG = "noise_avg"


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    provenance: str
    model_id: str
    head_scheme: str
    ood_score: float
    predicted_class: str
    true_or_target_class: str
    attack_config_digest: str | None
    head_fingerprint: str = ""

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}", module="harness", key="provenance")
        attacked = self.provenance in ("advID", "distal", "noiseID")
        if attacked and not self.attack_config_digest:
            raise ValidationError(f"{self.provenance} record without attack digest", module="harness",
                                  key="attack_config_digest")
        if not attacked and self.attack_config_digest is not None:
            raise ValidationError(f"{self.provenance} record must carry a null digest", module="harness",
                                  key="attack_config_digest")

    def to_json(self) -> str:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class TransferRow:
    whitebox_set: str
    target_model: str
    role: str
    head: str
    detector: str
    acc: float | None = None
    auroc: float | None = None
    fnr95: float | None = None
    fpr95: float | None = None
    tsuc: float | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ReportBundle:
    config: dict
    config_digest: str
    records: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    transfer: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)  # (model, head, detector) -> tau
    failures: dict = field(default_factory=dict)  # model id -> message
    schema_version: int = SCHEMA_VERSION

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def whitebox_ids(self) -> list:
        return list(self.config.get("whitebox_ids", []))

    def rows(self, role=None, metric=None, model_id=None) -> list:
        return [r for r in self.metrics if (role is None or r.role == role)
                and (metric is None or r.metric == metric) and (model_id is None or r.model_id == model_id)]

    def metric(self, metric: str, model_id: str, role=None) -> float:
        rows = self.rows(role, metric, model_id)
        if len(rows) != 1:
            raise NotFoundError(f"{len(rows)} rows for {metric} on {model_id} (role {role})", module="harness",
                                key="metric")
        return rows[0].value

    def whitebox_rows(self) -> list:
        return self.rows("whitebox")

    def blackbox_avg_rows(self) -> list:
        return self.rows(BLACKBOX_AVG)

    def score_distributions(self) -> dict:
        """``{(model, head): {provenance: scores}}`` in record order."""
        out: dict = {}
        for r in self.records:
            out.setdefault((r.model_id, r.head_scheme), {}).setdefault(r.provenance, []).append(r.ood_score)
        return {k: {p: np.array(v) for p, v in d.items()} for k, d in out.items()}

    def check_invariants(self) -> None:
        wb = set(self.whitebox_ids)
        bb = {r.model_id for r in self.rows("blackbox")}
        if wb & bb:
            raise IntegrityError(f"whitebox ids {sorted(wb & bb)} appear in blackbox rows", module="harness",
                                 key="whitebox_ids")
        if self.rows(BLACKBOX_AVG) and not bb:
            raise IntegrityError("blackbox average without blackbox rows", module="harness", key="whitebox_ids")

    def __eq__(self, other):
        if not isinstance(other, ReportBundle):
            return NotImplemented
        return (self.schema_version == other.schema_version and self.config == other.config
                and self.config_digest == other.config_digest and self.records == other.records
                and self.metrics == other.metrics and self.transfer == other.transfer
                and self.thresholds == other.thresholds and self.failures == other.failures)


# --------------------------------------------------------------------------- serialization


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_float(s: str):
    return None if s == "" else float(s)


def _write_csv(path: Path, columns: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version"] + columns)
        for r in rows:
            w.writerow([SCHEMA_VERSION] + [_fmt(v) for v in r])


def _check_version(found, where: str) -> None:
    try:
        found = int(found)
    except (TypeError, ValueError):
        raise MigrationError(f"{where}: unreadable schema_version {found!r}", found=found, expected=SCHEMA_VERSION,
                             module="harness", key="schema_version") from None
    if found != SCHEMA_VERSION:
        raise MigrationError(f"{where}: schema_version {found} but this build reads {SCHEMA_VERSION}",
                             found=found, expected=SCHEMA_VERSION, module="harness", key="schema_version")


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise NotFoundError(f"report file {path.name} is missing from {path.parent}", module="harness", key=path.name)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        _check_version(r.pop("schema_version", None), path.name)
    return rows


def write_report(report: ReportBundle, directory) -> Path:
    report.check_invariants()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    snap = {"schema_version": SCHEMA_VERSION, "digest": report.config_digest, "config": report.config}
    (d / "config.snapshot").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    with open(d / "records.ndjson", "w") as fh:
        for r in report.records:
            fh.write(r.to_json() + "\n")
    _write_csv(d / "metrics.csv", MetricRow.columns(),
               [[getattr(r, c) for c in MetricRow.columns()] for r in report.metrics])
    _write_csv(d / "transfer_matrix.csv", TransferRow.columns(),
               [[getattr(r, c) for c in TransferRow.columns()] for r in report.transfer])
    _write_csv(d / "thresholds.csv", ["model_id", "head", "detector", "tau"],
               [[m, h, det, tau] for (m, h, det), tau in report.thresholds.items()])
    (d / "failures.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "failures": report.failures}, indent=2, sort_keys=True) + "\n")
    return d


def read_report(directory) -> ReportBundle:
    d = Path(directory)
    snap_path = d / "config.snapshot"
    if not snap_path.is_file():
        raise NotFoundError(f"report file config.snapshot is missing from {d}", module="harness", key="config.snapshot")
    snap = json.loads(snap_path.read_text())
    _check_version(snap.get("schema_version"), "config.snapshot")
    if snapshot_digest(snap["config"]) != snap["digest"]:
        raise IntegrityError("config.snapshot digest does not match its contents", module="harness",
                             key="config.snapshot")

    rec_path = d / "records.ndjson"
    if not rec_path.is_file():
        raise NotFoundError(f"report file records.ndjson is missing from {d}", module="harness", key="records.ndjson")
    records = []
    with open(rec_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            _check_version(obj.pop("schema_version", None), "records.ndjson")
            records.append(ScoreRecord(**obj))

    metrics = []
    for r in _read_csv(d / "metrics.csv"):
        metrics.append(MetricRow(
            metric=r["metric"], value=float(r["value"]), n_pos=int(r["n_pos"]), n_neg=int(r["n_neg"]),
            threshold=_parse_float(r["threshold"]), model_id=r["model_id"], head=r["head"], detector=r["detector"],
            attack_config_digest=r["attack_config_digest"] or None, role=r["role"]))
    transfer = []
    for r in _read_csv(d / "transfer_matrix.csv"):
        transfer.append(TransferRow(
            r["whitebox_set"], r["target_model"], r["role"], r["head"], r["detector"],
            *[_parse_float(r[k]) for k in ("acc", "auroc", "fnr95", "fpr95", "tsuc")]))
    thresholds = {(r["model_id"], r["head"], r["detector"]): float(r["tau"]) for r in _read_csv(d / "thresholds.csv")}
    fail_path = d / "failures.json"
    if not fail_path.is_file():
        raise NotFoundError(f"report file failures.json is missing from {d}", module="harness", key="failures.json")
    fail = json.loads(fail_path.read_text())
    _check_version(fail.get("schema_version"), "failures.json")
    report = ReportBundle(snap["config"], snap["digest"], records, metrics, transfer, thresholds, fail["failures"])
    report.check_invariants()
    return report
