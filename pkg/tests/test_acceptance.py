"""Acceptance checks, one test per criterion.

Each test records a one-line verdict in ``conftest.ACCEPTANCE_LINES``; the
lines are printed together at the end of the run.
"""

import time
import numpy as np
import torch

from oodattack.attacks import (AttackSpec, DiversePolicy, Objective, TiKernel, afs_loss, run_attack,
                               target_embeddings, ti_smooth, ttafs_loss)
from oodattack.detect import DetectorConfig, clean_tpr
from oodattack.harness import (Campaign, CampaignConfig, epsilon_sweep, noise_baseline, read_report, run_campaign,
                               transfer_matrix, write_report)
from oodattack.heads import KnnHead, fit_linear_probe, knn_predict_proba, predict_proba, probe_objective_grad
from oodattack.metrics import auroc, auroc_bruteforce
from oodattack.zoo import value_and_grad
from oodattack.zoo.data import ToyWorldSpec
from oodattack.zoo.toy import toy_preset

from conftest import ACCEPTANCE_LINES
from test_attacks import explicit_convolution
from test_heads import brute_force_knn

POOL = ("toy-a", "toy-b", "toy-c")
REPORTS: list = []  # every report produced here, re-checked for the threshold contract


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"acceptance {number:02d} {name}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def _bundles():
    return {n: toy_preset(n) for n in POOL}


# --------------------------------------------------------------------------- 1


def test_01_projection_soundness():
    bundles = _bundles()
    names = ToyWorldSpec().class_names
    rng = np.random.default_rng(2024)
    total = violations = 0
    worst = 0.0
    t0 = time.perf_counter()
    run = 0
    while total < 10_000:
        members = [bundles[n] for n in rng.choice(POOL, size=rng.integers(1, 3), replace=False)]
        objective = Objective.OOD2ID_TTAFS if rng.random() < 0.3 else Objective.ID2OOD_AFS
        eps = float(rng.choice([1e-6, 1 / 255, 4 / 255, 16 / 255, rng.uniform(0, 0.3), 1.0]))
        spec = AttackSpec(
            objective=objective, epsilon=eps, steps=int(rng.integers(0, 4)),
            step_size=None if rng.random() < 0.5 else float(rng.uniform(0, 2 * max(eps, 1e-3))),
            momentum_mu=float(rng.uniform(0, 1.5)),
            di_policy=DiversePolicy(24, 32, float(rng.uniform(0, 1))) if rng.random() < 0.5 else None,
            ti_kernel=TiKernel.gaussian(int(rng.choice([3, 5]))) if rng.random() < 0.5 else None,
            lambda_afs=float(rng.uniform(0, 1)), seed=run,
            ensemble_weights=tuple(rng.dirichlet(np.ones(len(members)))) if rng.random() < 0.3 else None)
        n = 25
        x0 = torch.from_numpy(rng.uniform(size=(n, 3, 32, 32)))
        # saturated pixels sit right on the box boundary
        x0[rng.random(n) < 0.2] = torch.from_numpy(rng.integers(0, 2, size=(3, 32, 32)).astype(np.float64))
        targets = None
        if objective is Objective.OOD2ID_TTAFS:
            cls = rng.integers(0, len(names), size=n)
            targets = [t[torch.from_numpy(cls)] for t in target_embeddings(members, names)]
        x_adv = run_attack(members, x0, spec, targets).x_adv
        dev = (x_adv - x0).abs().flatten(1).max(dim=1).values
        bad = (dev > eps + 1e-6) | (x_adv.flatten(1).min(dim=1).values < 0) | (x_adv.flatten(1).max(dim=1).values > 1)
        violations += int(bad.sum())
        worst = max(worst, float((dev - eps).max()))
        total += n
        run += 1
    elapsed = time.perf_counter() - t0
    verdict(1, "projection soundness", violations == 0 and elapsed < 120,
            f"outputs={total} runs={run} violations={violations} max_excess={worst:.2e} time={elapsed:.1f}s")


# --------------------------------------------------------------------------- 2


def test_02_gradient_fidelity():
    bundles = list(_bundles().values())
    rng = np.random.default_rng(77)
    worst = 0.0
    h = 1e-4
    for pair in range(50):
        b = bundles[pair % 3]
        x0 = torch.from_numpy(rng.uniform(0.05, 0.95, size=(1, 3, 32, 32)))
        x = (x0 + torch.from_numpy(rng.uniform(-0.04, 0.04, size=x0.shape))).clamp(0, 1)
        d = torch.from_numpy(rng.normal(size=x.shape))
        kind = pair % 3
        if kind == 0:
            w = torch.from_numpy(rng.normal(size=b.embed_dim))
            fn = lambda z, b=b, w=w: (b.embed(z) @ w).sum()  # noqa: E731
        elif kind == 1:
            fn = lambda z, b=b, x0=x0: afs_loss(b, x0, z).sum()  # noqa: E731
        else:
            t = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=b.embed_dim)), dim=0)
            fn = lambda z, b=b, x0=x0, t=t: ttafs_loss(b, x0, z, t, 0.25).sum()  # noqa: E731
        _, g = value_and_grad(b, fn, x)
        analytic = float((g * d).sum())
        with torch.no_grad():
            numeric = float((fn(x + h * d) - fn(x - h * d)) / (2 * h))
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        worst = max(worst, rel)
    verdict(2, "gradient fidelity", worst < 1e-4, f"pairs=50 max_rel_err={worst:.2e}")


# --------------------------------------------------------------------------- 3


def test_03_auroc_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        n_pos, n_neg = rng.integers(1, 80, size=2)
        if i % 3 == 0:
            pos, neg = rng.normal(size=n_pos), rng.normal(0.3, size=n_neg)
        else:
            levels = int(rng.integers(1, 8))  # down to a single level: every pair tied
            pos, neg = rng.integers(0, levels, size=n_pos) / 7.0, rng.integers(0, levels, size=n_neg) / 7.0
        worst = max(worst, abs(auroc(pos, neg) - auroc_bruteforce(pos, neg)))
    verdict(3, "AUROC oracle", worst <= 1e-9, f"instances=1000 max_abs_diff={worst:.1e}")


# --------------------------------------------------------------------------- 4


def test_04_ti_equivalence():
    rng = np.random.default_rng(4)
    worst = 0.0
    for shape, size, kind in [((3, 32, 32), 5, "gaussian"), ((3, 32, 32), 7, "gaussian"), ((1, 13, 9), 3, "uniform"),
                              ((2, 20, 20), 9, "gaussian"), ((3, 16, 24), 5, "uniform")]:
        k = TiKernel.gaussian(size) if kind == "gaussian" else TiKernel.uniform(size)
        g = rng.normal(size=shape)
        got = ti_smooth(torch.from_numpy(g), k).numpy()
        worst = max(worst, float(np.abs(got - explicit_convolution(g, k.weights)).max()))
    verdict(4, "TI equivalence", worst < 1e-6, f"cases=5 max_abs_diff={worst:.1e}")


# --------------------------------------------------------------------------- 5


def test_05_whitebox_id2ood():
    cfg = CampaignConfig(model_pool=POOL, whitebox_ids=("toy-a",),
                         attack=AttackSpec(epsilon=16 / 255, steps=20, momentum_mu=1.0), epsilon_text="16/255")
    t0 = time.perf_counter()
    rep = run_campaign(cfg)
    elapsed = time.perf_counter() - t0
    REPORTS.append(rep)
    acc = rep.metric("acc", "toy-a", "whitebox")
    fnr = rep.metric("fnr95", "toy-a", "whitebox")
    n = rep.rows("whitebox", "acc")[0].n_pos
    verdict(5, "whitebox id2ood", acc <= 0.10 and fnr >= 0.90 and elapsed < 300 and n >= 200,
            f"n={n} acc={acc:.3f} fnr95={fnr:.3f} time={elapsed:.1f}s")


# --------------------------------------------------------------------------- 6


def test_06_blackbox_transfer():
    base = CampaignConfig(model_pool=POOL, whitebox_ids=("toy-a",))
    sources = [("toy-a",), ("toy-b",), ("toy-a", "toy-b")]
    parts, ok = [], True
    for eps in ("8/255", "16/255"):
        cfg = base.with_epsilon(eps)
        rows = {(r.whitebox_set, r.target_model): r for r in transfer_matrix(cfg, sources)}
        noise = noise_baseline(cfg, eps)
        REPORTS.append(noise)
        noise_c = noise.metric("fnr95", "toy-c", "noise")
        ens = rows[("toy-a+toy-b", "toy-c")].fnr95
        single = {s: rows[(s, "toy-c")].fnr95 for s in ("toy-a", "toy-b")}
        # every blackbox target beats noise on that same target
        for (src, target), r in rows.items():
            if r.role == "blackbox":
                ok &= r.fnr95 > noise.metric("fnr95", target, "noise")
        ok &= ens >= max(single.values())
        parts.append(f"eps={eps} toy-c fnr95: a+b={ens:.3f} a={single['toy-a']:.3f} b={single['toy-b']:.3f} "
                     f"noise={noise_c:.3f}")
    verdict(6, "blackbox transfer", bool(ok), "; ".join(parts))


# --------------------------------------------------------------------------- 7


def test_07_distal_whitebox():
    spec = AttackSpec(objective=Objective.OOD2ID_TTAFS, epsilon=1.0, steps=500, lambda_afs=0.25,
                      ti_kernel=TiKernel.gaussian(5))
    cfg = CampaignConfig(model_pool=POOL, whitebox_ids=("toy-a",), attack=spec, num_distals=100,
                         epsilon_text="unconstrained")
    t0 = time.perf_counter()
    rep = run_campaign(cfg)
    elapsed = time.perf_counter() - t0
    REPORTS.append(rep)
    tsuc = rep.metric("tsuc", "toy-a", "whitebox")
    fpr = rep.metric("fpr95", "toy-a", "whitebox")
    n = rep.rows("whitebox", "tsuc")[0].n_pos
    bb = " ".join(f"{m}:tsuc={rep.metric('tsuc', m, 'blackbox'):.2f}/fpr95={rep.metric('fpr95', m, 'blackbox'):.2f}"
                  for m in ("toy-b", "toy-c"))
    verdict(7, "distal whitebox", n == 100 and tsuc >= 0.95 and fpr >= 0.95 and elapsed < 600,
            f"n={n} tsuc={tsuc:.3f} fpr95={fpr:.3f} time={elapsed:.1f}s (blackbox {bb})")


# --------------------------------------------------------------------------- 8


def test_08_epsilon_sweep():
    cfg = CampaignConfig(model_pool=POOL, whitebox_ids=("toy-a",))
    eps = ["0", "2/255", "4/255", "8/255", "16/255"]
    sweep = epsilon_sweep(cfg, eps)
    REPORTS.extend(sweep.reports)
    acc = [r.metric("acc", "toy-a", "whitebox") for r in sweep.reports]
    fnr = [r.metric("fnr95", "toy-a", "whitebox") for r in sweep.reports]
    monotone = all(b <= a for a, b in zip(acc, acc[1:])) and all(b >= a for a, b in zip(fnr, fnr[1:]))
    zero = sweep.reports[0]
    exact = True
    for m in POOL:
        clean = [r.ood_score for r in zero.records if r.model_id == m and r.provenance == "cleanID"]
        tau = zero.thresholds[(m, "zeroshot", "MCM")]
        role = "whitebox" if m == "toy-a" else "blackbox"
        exact &= zero.metric("acc", m, role) == zero.metric("acc", m, "clean")
        exact &= zero.metric("fnr95", m, role) == float(np.mean(np.array(clean) < tau))
        exact &= zero.metric("auroc", m, role) == 0.5
    verdict(8, "epsilon sweep", monotone and exact,
            "acc=" + ",".join(f"{v:.3f}" for v in acc) + " fnr95=" + ",".join(f"{v:.3f}" for v in fnr)
            + f" eps0_equals_clean={exact}")


# --------------------------------------------------------------------------- 9


def test_09_threshold_contract(tmp_path):
    rep = run_campaign(CampaignConfig(model_pool=POOL, attack=AttackSpec(steps=0)))
    n = sum(r.provenance == "advID" and r.model_id == "toy-a" for r in rep.records)
    fnrs = [rep.metric("fnr95", m) for m in POOL]
    reports = REPORTS + [rep]
    worst = 1.0
    for k, report in enumerate(reports):
        # thresholds must survive a disk round trip unchanged
        back = read_report(write_report(report, tmp_path / f"r{k}"))
        for (mid, _, _), tau in back.thresholds.items():
            clean = [r.ood_score for r in back.records if r.model_id == mid and r.provenance == "cleanID"]
            worst = min(worst, clean_tpr(clean, tau))
    ok = worst >= 0.95 and n >= 200 and all(0.03 <= f <= 0.07 for f in fnrs)
    verdict(9, "threshold contract", ok,
            f"reports={len(reports)} min_clean_tpr={worst:.3f} steps0 n={n} fnr95=" + ",".join(f"{f:.3f}" for f in fnrs))


# --------------------------------------------------------------------------- 10


def test_10_head_correctness():
    cfg = CampaignConfig(model_pool=POOL, head_scheme="probe", detector=DetectorConfig("MSP"), mode="clean")
    c = Campaign(cfg).prepare()
    worst_grad, worst_sum, knn_mismatch, queries = 0.0, 0.0, 0, 0
    for mid in POOL:
        bundle = c.models[mid].bundle
        X = c._features(bundle, c.data.train.images)
        y = c.data.train.class_index
        Q = c._features(bundle, c.data.test.images)
        probes = [c.models[mid].head, fit_linear_probe(X, y, l2_strength=1e-2)]
        for probe in probes:
            worst_grad = max(worst_grad, float(np.linalg.norm(probe_objective_grad(probe, X, y))))
        knns = [KnnHead(X[:500], y[:500], 5, metric, 8) for metric in ("euclidean", "cosine")]
        for knn in knns:
            for q, row in zip(Q, knn_predict_proba(knn, Q)):
                knn_mismatch += not np.array_equal(row, brute_force_knn(knn.bank, knn.labels, q, 5, knn.metric, 8))
                queries += 1
        for h in probes + knns:
            worst_sum = max(worst_sum, float(np.abs(predict_proba(h, Q).sum(axis=1) - 1.0).max()))
    ok = knn_mismatch == 0 and worst_grad < 1e-5 and worst_sum <= 1e-9
    verdict(10, "head correctness", ok, f"knn_queries={queries} mismatches={knn_mismatch} "
            f"max_probe_grad={worst_grad:.1e} max_prob_sum_err={worst_sum:.1e}")


# --------------------------------------------------------------------------- 11


def test_11_determinism(tmp_path):
    cfg = CampaignConfig(model_pool=POOL, whitebox_ids=("toy-a", "toy-b"))
    write_report(run_campaign(cfg, workers=1), tmp_path / "w1")
    write_report(run_campaign(cfg, workers=3), tmp_path / "w3")
    same = {name: (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()
            for name in ("records.ndjson", "metrics.csv")}
    size = (tmp_path / "w1" / "records.ndjson").stat().st_size
    verdict(11, "determinism", all(same.values()),
            " ".join(f"{k}={'identical' if v else 'DIFFERENT'}" for k, v in same.items()) + f" records_bytes={size}")
