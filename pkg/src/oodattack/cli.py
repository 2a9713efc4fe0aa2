"""Command-line front end.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime/numeric
error, 3 campaign finished with some models failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackSpec, DiversePolicy, Objective, TiKernel, parse_fraction
from .detect import DetectorConfig
from .errors import ConfigError, MigrationError, NotFoundError, OodAttackError, ValidationError
from .harness.config import CampaignConfig, TaskSpec, fraction_text, snapshot_digest
from .zoo.data import ToyWorldSpec

log = logging.getLogger("oodattack")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

TASK_KEYS = ["task.kind", "task.seed", "task.path", "task.image_size", "task.ood_paths"] + [
    f"task.world.{k}" for k in ("image_size", "samples_per_class", "contrast", "background_noise",
                                "position_jitter", "scale_jitter", "color_jitter", "classes", "ood_kinds")]
POOL_KEYS = ["campaign.model_pool", "campaign.head_scheme", "campaign.output_dir", "campaign.chunk_size",
             "campaign.cache_dir", "detector.kind", "detector.temperature", "heads.knn_k", "heads.knn_metric",
             "heads.probe_l2", "heads.probe_max_iter"]
ATTACK_KEYS = ["campaign.whitebox_ids", "attack.epsilon", "attack.steps", "attack.step_size", "attack.momentum_mu",
               "attack.seed", "attack.ensemble_weights", "attack.start_jitter", "attack.di.enabled", "attack.di.min_size",
               "attack.di.max_size", "attack.di.prob", "attack.ti.size", "attack.ti.kind"]

COMMAND_KEYS = {
    "toy-data": TASK_KEYS + ["campaign.output_dir"],
    "model-fetch": ["campaign.model_pool", "campaign.cache_dir"],
    "attack-id2ood": TASK_KEYS + POOL_KEYS + ATTACK_KEYS,
    "attack-ood2id": TASK_KEYS + POOL_KEYS + ATTACK_KEYS + ["attack.lambda", "campaign.num_distals"],
    "eval-clean": TASK_KEYS + POOL_KEYS,
    "sweep": TASK_KEYS + POOL_KEYS + ATTACK_KEYS + ["sweep.epsilons", "sweep.noise_epsilon"],
    "report-render": ["campaign.output_dir"],
}

COMMAND_HELP = {
    "toy-data": "export the toy world as <split>/<class>/<index>.png trees",
    "model-fetch": "download hf:<repo> pool members into the weight cache",
    "attack-id2ood": "AFS campaign: push clean ID images to be rejected as OOD",
    "attack-ood2id": "TT+AFS campaign: grow noise-seeded distals accepted as target classes",
    "eval-clean": "clean ID vs natural OOD detection over the pool",
    "sweep": "ID2OOD campaign per epsilon plus the uniform-noise baseline",
    "report-render": "re-render histograms from a written report",
}

DEFAULTS = {
    "attack-id2ood": {"attack.epsilon": "16/255", "attack.steps": 20},
    "sweep": {"attack.epsilon": "16/255", "attack.steps": 20,
              "sweep.epsilons": ["0", "2/255", "4/255", "8/255", "16/255"], "sweep.noise_epsilon": "16/255"},
    "attack-ood2id": {"attack.epsilon": "16/255", "attack.steps": 500, "attack.ti.size": 5},
}

# the objective is fixed by the command, never read from the config
OBJECTIVES = {"attack-id2ood": "ID2OOD_AFS", "sweep": "ID2OOD_AFS", "attack-ood2id": "OOD2ID_TTAFS"}


# --------------------------------------------------------------------------- config loading


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str):
    """``key=value``; the value is read as a TOML literal, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}", module="cli", key=text)
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_flat_config(path, overrides, command: str) -> dict:
    flat = dict(DEFAULTS.get(command, {}))
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist", module="cli", key="--config")
        try:
            flat.update(_flatten(tomllib.loads(p.read_text())))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {p}: {e}", module="cli", key="--config") from e
    for item in overrides or []:
        k, v = parse_override(item)
        flat[k] = v
    # one config file may serve several commands; only keys no command reads are rejected
    known = set().union(*COMMAND_KEYS.values())
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}", module="cli", key=unknown[0])
    if command in OBJECTIVES:
        flat["attack.objective"] = OBJECTIVES[command]
    return flat


def _get(flat: dict, key: str, conv, default=None):
    if key not in flat or flat[key] is None:
        return default
    try:
        return conv(flat[key])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value {flat[key]!r}: {e}", module="cli", key=key) from e


def _world(flat: dict) -> ToyWorldSpec:
    kw = {k[len("task.world."):]: v for k, v in flat.items() if k.startswith("task.world.")}
    try:
        return ToyWorldSpec(**kw)
    except TypeError as e:
        raise ConfigError(str(e), module="cli", key="task.world") from e


def build_task(flat: dict) -> TaskSpec:
    return TaskSpec(kind=flat.get("task.kind", "toy"), world=_world(flat), seed=_get(flat, "task.seed", int, 0),
                    path=flat.get("task.path"), image_size=_get(flat, "task.image_size", int),
                    ood_paths=_get(flat, "task.ood_paths", tuple, ()))


def build_attack(flat: dict) -> tuple[AttackSpec, str | None, bool]:
    eps_raw = flat.get("attack.epsilon", "16/255")
    eps_text = fraction_text(eps_raw) if isinstance(eps_raw, str) else None
    di_enabled = bool(flat.get("attack.di.enabled", True))
    di = None
    if di_enabled and ("attack.di.min_size" in flat or "attack.di.max_size" in flat):
        if "attack.di.min_size" not in flat or "attack.di.max_size" not in flat:
            raise ConfigError("set both attack.di.min_size and attack.di.max_size", module="cli",
                              key="attack.di.min_size")
        di = DiversePolicy(_get(flat, "attack.di.min_size", int), _get(flat, "attack.di.max_size", int),
                           _get(flat, "attack.di.prob", float, 0.5))
    ti = None
    if flat.get("attack.ti.size"):
        size = _get(flat, "attack.ti.size", int)
        kind = flat.get("attack.ti.kind", "gaussian")
        if kind not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown TI kernel kind {kind!r}", module="cli", key="attack.ti.kind")
        ti = TiKernel.gaussian(size) if kind == "gaussian" else TiKernel.uniform(size)
    step = flat.get("attack.step_size")
    weights = flat.get("attack.ensemble_weights")
    spec = AttackSpec(
        objective=_get(flat, "attack.objective", Objective, Objective.ID2OOD_AFS),
        epsilon=parse_fraction(eps_raw),
        steps=_get(flat, "attack.steps", int, 20),
        step_size=None if step in (None, "") else parse_fraction(step),
        momentum_mu=_get(flat, "attack.momentum_mu", float, 1.0),
        di_policy=di,
        ti_kernel=ti,
        lambda_afs=_get(flat, "attack.lambda", float, 0.25),
        ensemble_weights=tuple(weights) if weights else None,
        seed=_get(flat, "attack.seed", int, 0),
        start_jitter=_get(flat, "attack.start_jitter", float, 1e-3),
    )
    return spec, eps_text, di_enabled and di is None


def build_campaign_config(flat: dict, command: str) -> CampaignConfig:
    spec, eps_text, di_auto = build_attack(flat)
    detector = DetectorConfig(flat.get("detector.kind", "MCM"), _get(flat, "detector.temperature", float, 1.0))
    pool = tuple(flat.get("campaign.model_pool", ("toy-a", "toy-b", "toy-c")))
    return CampaignConfig(
        task=build_task(flat),
        model_pool=pool,
        whitebox_ids=tuple(flat.get("campaign.whitebox_ids", pool[:1])),
        head_scheme=flat.get("campaign.head_scheme", "zeroshot"),
        detector=detector,
        attack=spec,
        num_distals=_get(flat, "campaign.num_distals", int, 100),
        output_dir=flat.get("campaign.output_dir"),
        mode="clean" if command == "eval-clean" else "attack",
        epsilon_text=eps_text,
        di_auto=di_auto,
        chunk_size=_get(flat, "campaign.chunk_size", int, 20),
        knn_k=_get(flat, "heads.knn_k", int, 5),
        knn_metric=flat.get("heads.knn_metric", "euclidean"),
        probe_l2=_get(flat, "heads.probe_l2", float),
        probe_max_iter=_get(flat, "heads.probe_max_iter", int, 1000),
        cache_dir=flat.get("campaign.cache_dir") or os.environ.get("OODATTACK_CACHE_DIR"),
    )


# --------------------------------------------------------------------------- commands


def _out_dir(flat: dict, args) -> Path:
    d = args.output_dir or flat.get("campaign.output_dir")
    if not d:
        raise ConfigError("no output directory; pass --output-dir or set campaign.output_dir", module="cli",
                          key="campaign.output_dir")
    return Path(d)


def _print_metrics(report) -> None:
    print(f"{'role':<13} {'model':<24} {'metric':<7} value")
    for r in report.metrics:
        print(f"{r.role:<13} {r.model_id:<24} {r.metric:<7} {r.value:.4f}")
    for mid, msg in report.failures.items():
        print(f"FAILED {mid}: {msg}")


def cmd_toy_data(flat, args) -> int:
    from .zoo.data import export_toy_dataset

    task = build_task(flat)
    print(f"config digest: {snapshot_digest(task.to_dict())}")
    out = _out_dir(flat, args)
    export_toy_dataset(task.world, out, seed=task.seed)
    print(f"wrote toy dataset ({len(task.world.class_names)} classes) to {out}")
    return EXIT_OK


def cmd_model_fetch(flat, args) -> int:
    from .zoo.hub import ModelCache

    pool = list(flat.get("campaign.model_pool", []))
    cache_dir = flat.get("campaign.cache_dir") or os.environ.get("OODATTACK_CACHE_DIR")
    print(f"config digest: {snapshot_digest({'model_pool': pool, 'cache_dir': cache_dir})}")
    cache = ModelCache(cache_dir)
    for mid in pool:
        if not mid.startswith("hf:"):
            print(f"{mid}: built in, nothing to fetch")
            continue
        weights, manifest = cache.resolve(mid[3:])
        print(f"{mid}: cached at {weights.parent} (digest {manifest['digest'][:12]})")
    return EXIT_OK


def _finish(report, out: Path) -> int:
    from .harness import render_histograms, write_report

    write_report(report, out)
    render_histograms(report, out)
    _print_metrics(report)
    print(f"report written to {out}")
    return EXIT_PARTIAL if report.partial else EXIT_OK


def cmd_campaign(flat, args, command) -> int:
    from .harness import run_campaign

    cfg = build_campaign_config(flat, command)
    out = _out_dir(flat, args)
    print(f"config digest: {cfg.digest()}")
    return _finish(run_campaign(cfg, workers=args.workers), out)


def cmd_sweep(flat, args) -> int:
    from .harness import epsilon_sweep, render_example_grid, render_histograms, render_sweep, write_report
    from .harness.render import safe_name

    cfg = build_campaign_config(flat, "sweep")
    out = _out_dir(flat, args)
    epsilons = flat.get("sweep.epsilons")
    if not isinstance(epsilons, list) or not epsilons:
        raise ConfigError("sweep.epsilons must be a nonempty list", module="cli", key="sweep.epsilons")
    noise_eps = flat.get("sweep.noise_epsilon")
    print(f"config digest: {snapshot_digest({'campaign': cfg.to_dict(), 'epsilons': [str(e) for e in epsilons], 'noise': str(noise_eps)})}")
    sweep = epsilon_sweep(cfg, [str(e) for e in epsilons], workers=args.workers, noise_epsilon=noise_eps)
    out.mkdir(parents=True, exist_ok=True)
    partial = False
    for text, rep in zip(sweep.epsilons, sweep.reports):
        d = out / f"eps_{safe_name(text.replace('/', '-'))}"
        write_report(rep, d)
        render_histograms(rep, d)
        partial |= rep.partial
    if sweep.noise is not None:
        write_report(sweep.noise, out / "noise")
        partial |= sweep.noise.partial
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "model_id", "metric"] + sweep.epsilons)
        for mid, series in sweep.series.items():
            for metric, values in series.items():
                w.writerow([1, mid, metric] + [repr(v) for v in values])
    render_sweep(sweep, out)
    render_example_grid(sweep.examples, out / "plots" / "adv_grid.png")
    for mid, series in sweep.series.items():
        for metric, values in series.items():
            print(f"{mid:<24} {metric:<7} " + " ".join(f"{v:.3f}" for v in values))
    print(f"sweep written to {out}")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_report_render(flat, args) -> int:
    from .harness import read_report, render_histograms

    d = _out_dir(flat, args)
    report = read_report(d)
    print(f"config digest: {report.config_digest}")
    for p in render_histograms(report, d):
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: [cli] {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodattack", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        epilog = "config keys:\n" + "\n".join(f"  {k}" for k in keys)
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name], epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--output-dir", help="overrides campaign.output_dir")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    return parser


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be positive", module="cli", key="--workers")
        flat = load_flat_config(args.config, args.set, args.command)
        if args.command == "toy-data":
            return cmd_toy_data(flat, args)
        if args.command == "model-fetch":
            return cmd_model_fetch(flat, args)
        if args.command == "sweep":
            return cmd_sweep(flat, args)
        if args.command == "report-render":
            return cmd_report_render(flat, args)
        return cmd_campaign(flat, args, args.command)
    except (ConfigError, ValidationError, NotFoundError, MigrationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OodAttackError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ArithmeticError, OSError) as e:
        print(f"error: [runtime] {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
