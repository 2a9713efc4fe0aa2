import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oodattack.attacks import (AttackSpec, DiversePolicy, Objective, PerturbationState, TiKernel, afs_loss,
                               cosine_similarity, di_transform, ensemble_loss, make_distal_seed, momentum_update,
                               parse_fraction, pgd_step, run_attack, sample_rng, start_point, target_embeddings, ti_smooth,
                               ttafs_loss, within_budget)
from oodattack.errors import ConfigError, DegenerateVectorError, NumericError, UnsupportedBundleError
from oodattack.zoo import format_prompt

from conftest import rand_images


def explicit_convolution(grad: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded per-channel convolution written as the textbook double sum."""
    c, h, wd = grad.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros_like(grad)
    for ch in range(c):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        ii, jj = i + a - r, j + b - r
                        if 0 <= ii < h and 0 <= jj < wd:
                            acc += w[k - 1 - a, k - 1 - b] * grad[ch, ii, jj]
                out[ch, i, j] = acc
    return out


# --------------------------------------------------------------------------- cosine and objectives


def test_cosine_examples():
    assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ConfigError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(u, v):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    a, b = cosine_similarity(u, v), cosine_similarity(v, u)
    assert a == b
    assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12


def test_ttafs_examples(toy_a, rng):
    x = rand_images(rng, 1)[0]
    with torch.no_grad():
        start = toy_a.embed(x)[0]
    assert float(ttafs_loss(toy_a, x, x, start, 1.0)) == pytest.approx(0.0, abs=1e-12)
    assert float(ttafs_loss(toy_a, x, x, start, 0.0)) == pytest.approx(1.0, abs=1e-12)
    # 0.9 - 0.25 * 0.2
    assert 0.9 - 0.25 * 0.2 == pytest.approx(0.85)


def test_ttafs_two_term_value(toy_a, rng):
    x0, xa = rand_images(rng, 2)
    t = torch.from_numpy(rng.normal(size=toy_a.embed_dim))
    with torch.no_grad():
        e0, ea = toy_a.embed(x0)[0], toy_a.embed(xa)[0]
    expected = float(cosine_similarity(ea, t) - 0.25 * cosine_similarity(ea, e0))
    assert float(ttafs_loss(toy_a, x0, xa, t, 0.25)) == pytest.approx(expected, abs=1e-12)


def test_target_embeddings_need_text_tower(toy_a, world):
    class Blind:
        has_text_tower = False
        id = "blind"

    assert target_embeddings([toy_a], world.class_names)[0].shape == (8, toy_a.embed_dim)
    with pytest.raises(UnsupportedBundleError):
        target_embeddings([Blind()], world.class_names)


def test_distal_seed():
    a = make_distal_seed((3, 32, 32), 7)
    assert torch.equal(a, make_distal_seed((3, 32, 32), 7))
    assert not torch.equal(a, make_distal_seed((3, 32, 32), 7, index=1))
    big = make_distal_seed((3, 224, 224), 0)
    assert 0.49 <= float(big.mean()) <= 0.51
    for seed in range(20):
        s = make_distal_seed((3, 16, 16), seed)
        assert float(s.min()) >= 0.0 and float(s.max()) <= 1.0


# --------------------------------------------------------------------------- DI / TI / momentum / step


def test_di_identity_cases(rng):
    x = rand_images(rng, 1)[0]
    assert torch.equal(di_transform(x, DiversePolicy(24, 32, 0.0), np.random.default_rng(0)), x)
    assert torch.equal(di_transform(x, DiversePolicy(32, 32, 1.0), np.random.default_rng(0)), x)


def test_di_resize_and_pad(rng):
    x = rand_images(rng, 1)[0]
    outs = [di_transform(x, DiversePolicy(20, 28, 1.0), np.random.default_rng(s)) for s in range(10)]
    for o in outs:
        assert o.shape == x.shape
        # at least a 4-pixel frame of zero padding is present in total
        zero_rows = (o.abs().sum(dim=(0, 2)) == 0).sum() + (o.abs().sum(dim=(0, 1)) == 0).sum()
        assert int(zero_rows) >= 8
    again = [di_transform(x, DiversePolicy(20, 28, 1.0), np.random.default_rng(s)) for s in range(10)]
    assert all(torch.equal(a, b) for a, b in zip(outs, again))


def test_di_size_checks(rng):
    x = rand_images(rng, 1)[0]
    with pytest.raises(ConfigError):
        di_transform(x, DiversePolicy(170, 224, 0.5), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        DiversePolicy(30, 20)
    with pytest.raises(ConfigError):
        DiversePolicy(10, 20, 1.5)
    assert DiversePolicy.scaled_to(224) == DiversePolicy(170, 224, 0.5)
    assert DiversePolicy.scaled_to(32) == DiversePolicy(24, 32, 0.5)


def test_ti_identity_and_constants(rng):
    g = torch.from_numpy(rng.normal(size=(3, 9, 9)))
    assert torch.equal(ti_smooth(g, TiKernel(1, np.ones((1, 1)))), g)
    const = torch.full((1, 11, 11), 2.5, dtype=torch.float64)
    out = ti_smooth(const, TiKernel.gaussian(5))
    assert float(out[0, 5, 5]) == pytest.approx(2.5, abs=1e-12)
    assert float(out[0, 0, 0]) < 2.5  # zero padding at the border


@pytest.mark.parametrize("shape,size,kind", [((1, 9, 9), 5, "gaussian"), ((3, 32, 32), 5, "gaussian"),
                                             ((2, 12, 7), 3, "uniform"), ((3, 16, 16), 7, "gaussian")])
def test_ti_matches_explicit_sum(shape, size, kind, rng):
    k = TiKernel.gaussian(size) if kind == "gaussian" else TiKernel.uniform(size)
    g = rng.normal(size=shape)
    got = ti_smooth(torch.from_numpy(g), k).numpy()
    assert np.abs(got - explicit_convolution(g, k.weights)).max() < 1e-6


def test_ti_kernel_validation():
    with pytest.raises(ConfigError):
        TiKernel.gaussian(4)
    with pytest.raises(ConfigError):
        TiKernel(3, np.full((3, 3), 0.2))
    asym = np.zeros((3, 3))
    asym[0, 0] = 1.0
    with pytest.raises(ConfigError):
        TiKernel(3, asym)
    k = TiKernel.gaussian(5)
    assert k.weights.sum() == pytest.approx(1.0, abs=1e-12)
    # sigma = size / 3
    assert k.weights[2, 0] / k.weights[2, 2] == pytest.approx(math.exp(-4 / (2 * (5 / 3) ** 2)))


def test_momentum_cases(rng):
    g = torch.from_numpy(rng.normal(size=(3, 8, 8)))
    prev = torch.from_numpy(rng.normal(size=(3, 8, 8)))
    l1 = g.abs().sum()
    assert torch.equal(momentum_update(torch.zeros_like(g), g, 1.0), g / l1)
    assert torch.equal(momentum_update(prev, g, 0.0), g / l1)
    assert torch.equal(momentum_update(prev, torch.zeros_like(g), 0.7), 0.7 * prev)
    assert torch.allclose(momentum_update(prev, g, 0.5), 0.5 * prev + g / l1)
    batch = torch.stack([g, 2 * g])
    out = momentum_update(torch.zeros_like(batch), batch, 1.0)
    assert torch.allclose(out[0], out[1])  # per-sample normalization
    with pytest.raises(ConfigError):
        momentum_update(prev[:1], g, 1.0)


def _state(x0, xa):
    x0 = torch.tensor([[[x0]]], dtype=torch.float64)
    return PerturbationState(x0, torch.tensor([[[xa]]], dtype=torch.float64), torch.zeros_like(x0))


def test_pgd_step_examples():
    spec = AttackSpec(epsilon=0.05, step_size=0.1, steps=1)
    one = torch.ones(1, 1, 1, dtype=torch.float64)
    assert float(pgd_step(_state(0.5, 0.5), one, spec, "descend").x_adv) == pytest.approx(0.45)
    out = pgd_step(_state(0.5, 0.54), one, spec, "ascend")
    assert float(out.x_adv) == pytest.approx(0.55) and out.iteration == 1
    assert float(pgd_step(_state(0.01, 0.0), one, spec, "descend").x_adv) == 0.0
    with pytest.raises(ConfigError):
        pgd_step(_state(0.5, 0.5), one, spec, "sideways")


def test_ensemble_loss_examples(toy_pool):
    a = toy_pool[0]
    assert ensemble_loss([a], [1.0], [0.3]) == 0.3
    assert ensemble_loss(toy_pool[:2], None, [0.2, 0.8]) == pytest.approx(0.5)
    assert ensemble_loss(toy_pool, [0.5, 0.25, 0.25], [1.0, 0.0, 0.0]) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        ensemble_loss([], None, [])
    with pytest.raises(ConfigError):
        ensemble_loss(toy_pool, None, [1.0])


# --------------------------------------------------------------------------- spec


def test_attack_spec_validation():
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=0.0)
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=1.5)
    with pytest.raises(ConfigError):
        AttackSpec(step_size=0.0)
    with pytest.raises(ConfigError):
        AttackSpec(momentum_mu=-1)
    with pytest.raises(ConfigError):
        AttackSpec(lambda_afs=-0.1)
    with pytest.raises(ConfigError):
        AttackSpec(ensemble_weights=(0.5, 0.6))
    assert AttackSpec(ensemble_weights=(0.25, 0.75)).weights_for(2) == (0.25, 0.75)
    with pytest.raises(ConfigError):
        AttackSpec(ensemble_weights=(0.25, 0.75)).weights_for(3)
    assert AttackSpec().alpha == pytest.approx(16 / 255 / 20)


def test_parse_fraction():
    assert parse_fraction("16/255") == 16 / 255
    assert parse_fraction("0.5") == 0.5
    assert parse_fraction(2) == 2.0
    assert parse_fraction("unconstrained") == 1.0
    with pytest.raises(ConfigError):
        parse_fraction("sixteen")


def test_spec_flat_round_trip():
    spec = AttackSpec(objective=Objective.OOD2ID_TTAFS, epsilon=8 / 255, steps=7, step_size=0.01, momentum_mu=0.5,
                      di_policy=DiversePolicy(20, 30, 0.3), ti_kernel=TiKernel.gaussian(3), lambda_afs=0.1,
                      ensemble_weights=(0.5, 0.5), seed=9)
    assert AttackSpec.from_flat(spec.to_flat()) == spec
    assert AttackSpec.from_flat(spec.to_flat()).digest() == spec.digest()
    with pytest.raises(ConfigError):
        AttackSpec.from_flat({"epsilon": 0.1, "gamma": 2})


# --------------------------------------------------------------------------- driver


def test_steps_zero_is_noop(toy_a, rng):
    x = rand_images(rng, 3)
    res = run_attack(toy_a, x, AttackSpec(steps=0))
    assert torch.equal(res.x_adv, x)
    assert res.loss_trace.shape == (0, 3)


def test_afs_loss_decreases(toy_pool, rng):
    x = rand_images(rng, 6, lo=0.3, hi=0.7)
    for b in toy_pool:
        spec = AttackSpec(epsilon=16 / 255, steps=20, di_policy=DiversePolicy.scaled_to(32))
        res = run_attack(b, x, spec)
        with torch.no_grad():
            final = afs_loss(b, x, res.x_adv)
        assert (final < torch.from_numpy(res.loss_trace[0])).all()
        assert within_budget(res.x_adv, x, spec.epsilon)


def test_monotone_whitebox_pressure(toy_a, rng):
    spec = AttackSpec(epsilon=8 / 255, steps=10, step_size=8 / 255 / 40, momentum_mu=0.0)
    ok = 0
    trials = 40
    for t in range(trials):
        x = rand_images(np.random.default_rng(t), 1, lo=0.2, hi=0.8)
        trace = run_attack(toy_a, x[0], spec).loss_trace
        ok += bool(np.all(np.diff(trace) <= 1e-12))
    assert ok / trials >= 0.95


def test_ttafs_lambda_zero_matches_plain_ascent(toy_a, rng):
    x0 = make_distal_seed((3, 32, 32), 3)
    target = target_embeddings([toy_a], ["red_square"])[0][0]
    spec = AttackSpec(objective=Objective.OOD2ID_TTAFS, epsilon=0.2, steps=8, lambda_afs=0.0,
                      di_policy=DiversePolicy(24, 32, 0.5), ti_kernel=TiKernel.gaussian(3), seed=4)
    res = run_attack(toy_a, x0, spec, target)

    state = PerturbationState.start(x0.unsqueeze(0))
    trace = []
    for it in range(spec.steps):
        def loss(x):
            x = di_transform(x[0], spec.di_policy, sample_rng(spec.seed, 0, it, 0)).unsqueeze(0)
            return cosine_similarity(toy_a.embed(x), target)

        v, g = toy_a.value_and_grad(loss, state.x_adv)
        trace.append(float(v))
        g = ti_smooth(g, spec.ti_kernel)
        state.momentum_buffer = momentum_update(state.momentum_buffer, g, spec.momentum_mu)
        state = pgd_step(state, state.momentum_buffer, spec, "ascend")
    assert torch.equal(res.x_adv, state.x_adv[0])
    assert np.array_equal(res.loss_trace, np.array(trace))


def test_batching_does_not_change_results(toy_pool, rng):
    x = rand_images(rng, 5)
    spec = AttackSpec(steps=5, di_policy=DiversePolicy(24, 32, 0.5), ti_kernel=TiKernel.gaussian(3), seed=11)
    whole = run_attack(toy_pool[:2], x, spec).x_adv
    parts = torch.cat([run_attack(toy_pool[:2], x[i:i + 2], spec, sample_indices=range(i, min(i + 2, 5))).x_adv
                       for i in range(0, 5, 2)])
    assert torch.equal(whole, parts)
    assert torch.equal(whole, run_attack(toy_pool[:2], x, spec).x_adv)


def test_start_point(rng):
    x = rand_images(rng, 4)
    x[0] = 0.0
    spec = AttackSpec(epsilon=0.1, start_jitter=0.01, seed=2)
    s = start_point(x, spec, range(4))
    assert float((s - x).abs().max()) <= 0.001 + 1e-15
    assert float(s.min()) >= 0.0
    assert not torch.equal(s, x)
    assert torch.equal(s[2:], start_point(x[2:], spec, [2, 3]))
    assert torch.equal(start_point(x, AttackSpec(start_jitter=0.0), range(4)), x)


def test_run_attack_argument_errors(toy_pool, rng, world):
    x = rand_images(rng, 2)
    t = target_embeddings(toy_pool[:1], world.class_names)[0][0]
    with pytest.raises(ConfigError):
        run_attack(toy_pool[0], x, AttackSpec(), target_embedding=t)
    with pytest.raises(ConfigError):
        run_attack(toy_pool[0], x, AttackSpec(objective=Objective.OOD2ID_TTAFS))
    with pytest.raises(ConfigError):
        run_attack(toy_pool[:2], x, AttackSpec(objective=Objective.OOD2ID_TTAFS), target_embedding=t)
    with pytest.raises(ConfigError):
        run_attack([], x, AttackSpec())
    with pytest.raises(ConfigError):
        run_attack(toy_pool[0], x, AttackSpec(steps=1), sample_indices=[0])


def test_nonfinite_member_loss_carries_trace(toy_a, rng):
    class Broken(type(toy_a)):
        def features(self, x):
            f = super().features(x)
            return f * float("nan")

    b = Broken.__new__(Broken)
    b.__dict__.update(toy_a.__dict__)
    with pytest.raises(NumericError) as info:
        run_attack(b, rand_images(rng, 1), AttackSpec(steps=3))
    assert info.value.diagnostics["iteration"] == 0


def test_stalled_gradient_is_flagged(toy_a):
    class Flat(type(toy_a)):
        def features(self, x):
            return super().features(x) * 0.0 + 1.0

    b = Flat.__new__(Flat)
    b.__dict__.update(toy_a.__dict__)
    x = torch.full((1, 3, 32, 32), 0.5, dtype=torch.float64)
    res = run_attack(b, x, AttackSpec(steps=2, start_jitter=0.0))
    assert [w["iteration"] for w in res.warnings] == [0, 1]
    assert res.warnings[0]["warning"] == "stalled gradient"
    assert torch.equal(res.x_adv, x)


def test_trace_csv(toy_pool, rng, tmp_path):
    res = run_attack(toy_pool[:2], rand_images(rng, 1)[0], AttackSpec(steps=3))
    res.write_trace_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,member_0,member_1"
    assert len(lines) == 4


# --------------------------------------------------------------------------- projection soundness (property)


@settings(max_examples=40, deadline=None)
@given(
    eps=st.floats(1e-3, 1.0),
    steps=st.integers(0, 4),
    step_mult=st.floats(0.1, 5.0),
    mu=st.floats(0.0, 2.0),
    di=st.booleans(),
    ti=st.sampled_from([None, 1, 3, 5]),
    ttafs=st.booleans(),
    seed=st.integers(0, 2**31 - 1),
)
def test_projection_property(toy_a, eps, steps, step_mult, mu, di, ti, ttafs, seed):
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(rng.choice([0.0, 1.0, 0.5], size=(2, 3, 32, 32)) * rng.uniform(0.9, 1.0, size=(2, 3, 32, 32)))
    spec = AttackSpec(objective=Objective.OOD2ID_TTAFS if ttafs else Objective.ID2OOD_AFS, epsilon=eps, steps=steps,
                      step_size=eps * step_mult, momentum_mu=mu,
                      di_policy=DiversePolicy(20, 32, 0.5) if di else None,
                      ti_kernel=TiKernel.gaussian(ti) if ti else None, seed=seed)
    target = torch.from_numpy(rng.normal(size=toy_a.embed_dim)) if ttafs else None
    x_adv = run_attack(toy_a, x0, spec, target).x_adv
    assert (x_adv - x0).abs().max() <= eps + 1e-6
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0
