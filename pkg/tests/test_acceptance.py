"""Acceptance gate: one test per criterion, each printing a PASS/FAIL verdict line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the "acceptance criteria" section of the terminal summary.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from isorobust.attacks import ManifoldAttackConfig, PgdConfig, manifold_attack_batch, pgd_l2_batch
from isorobust.bounds import BoundParams, theorem1_lower_bound, theorem2_bound
from isorobust.classify import Architecture, HalfspaceClassifier, TrainConfig, train
from isorobust.cli import main
from isorobust.gaussian import RngStream
from isorobust.genmodel import ConditionalModel, Generator, make_synthetic, sample_dataset
from isorobust.lipschitz import LipschitzConfig, estimate_all_classes, estimate_local_lipschitz
from isorobust.risk import (ball_distance, estimate_adv_risk, estimate_risk, halfspace_distance, in_adv_risk_curve,
                            mc_expansion_measure)
from isorobust.verify import corner_checks, gradient_checks, qp_linear_halfspace_distance


def _bound_cli(capsys, alpha, lmax):
    assert main(["bound", "--variant", "tilde", "--alpha", str(alpha), "--eps", "1", "2", "3", "--delta", "0.001",
                 "--lmax", str(lmax), "--priors", "uniform:10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    return [float(line.split(",")[1]) for line in lines[2:]]


def test_c1_published_bound_table(capsys, verdict):
    t0 = time.perf_counter()
    mnist = _bound_cli(capsys, 0.015, 11.0)
    imagenet = _bound_cli(capsys, 0.15, 14.9)
    elapsed = time.perf_counter() - t0
    cells = list(zip(mnist, (0.982, 0.978, 0.972))) + list(zip(imagenet, (0.835, 0.818, 0.800)))
    misses = [f"{got:.5f} vs {want:.3f}" for got, want in cells if abs(got - want) > 0.0005]
    detail = (f"mnist {[round(v, 5) for v in mnist]}, imagenet10 {[round(v, 5) for v in imagenet]}, "
              f"{elapsed:.3f}s; outside +-0.0005: {misses or 'none'}")
    assert verdict("C1 bound table", not misses and elapsed < 1.0, detail)


def test_c2_worked_bound(verdict):
    b = theorem2_bound(BoundParams(1.0, 0.05, 1.0, (1.0,), 0.0, "tilde")).raw
    assert verdict("C2 worked bound", abs(b - 0.7405) <= 0.0005, f"{b:.6f} vs 0.7405 +- 0.0005")


def test_c3_isoperimetric(verdict):
    t0 = time.perf_counter()
    p, r = 0.1, 0.5
    target = stats.norm.cdf(stats.norm.ppf(p) + r)
    half = mc_expansion_measure(halfspace_distance(np.eye(10)[0], stats.norm.ppf(p)), r, 10, 1_000_000,
                                RngStream(2024, 0x90))
    eq_ok = abs(half.value - target) <= 3 * half.stderr
    d = 5
    ball = mc_expansion_measure(ball_distance(np.zeros(d), math.sqrt(stats.chi2.ppf(p, d))), r, d, 1_000_000,
                                RngStream(2024, 0x91))
    ineq_ok = ball.value >= target - 3 * ball.stderr
    elapsed = time.perf_counter() - t0
    detail = (f"half-space {half.value:.5f} vs {target:.5f} (3se {3 * half.stderr:.5f}); "
              f"ball {ball.value:.5f} >= {target:.5f}; {elapsed:.1f}s")
    assert verdict("C3 isoperimetric", eq_ok and ineq_ok and elapsed < 30, detail)


def test_c4_corner_optimality(verdict):
    t0 = time.perf_counter()
    checks = corner_checks(2) + corner_checks(3)
    elapsed = time.perf_counter() - t0
    bad = [c.name for c in checks if not c.passed]
    detail = f"{len(checks) - len(bad)}/{len(checks)} draws agree, failures {bad or 'none'}; {elapsed:.1f}s"
    assert verdict("C4 corner optimality", not bad and elapsed < 120, detail)


def test_c5_lipschitz(verdict):
    t0 = time.perf_counter()
    exact = estimate_local_lipschitz(make_synthetic("scaled-identity", c=2.0, d=2).generators[0],
                                     LipschitzConfig(samples=1000, neighbors=2000, seed=1))
    diag = estimate_local_lipschitz(Generator.linear(np.diag([3.0, 1.0])),
                                    LipschitzConfig(samples=1000, neighbors=2000, seed=2))
    worst = -math.inf
    for t in range(10):
        A = RngStream(55, 0x92, (t,)).generator().standard_normal((4, 2))
        smax = np.linalg.svd(A, compute_uv=False)[0]
        est = estimate_local_lipschitz(Generator.linear(A), LipschitzConfig(samples=1000, neighbors=2000, seed=t))
        worst = max(worst, (est - smax) / smax)
    elapsed = time.perf_counter() - t0
    # differences of linear images are exact in real arithmetic; floating-point rounding is the only slack
    ok = exact == 2.0 and 2.9 <= diag <= 3.0 and worst <= 1e-9 and elapsed < 60
    detail = (f"scaled-identity {exact!r}, diag(3,1) {diag:.5f}, max (L - smax)/smax {worst:.3g} "
              f"(float slack 1e-9); {elapsed:.1f}s")
    assert verdict("C5 Lipschitz estimator", ok, detail)


@pytest.mark.slow
def test_c6_lower_bound_tightness(verdict):
    t0 = time.perf_counter()
    m = make_synthetic("shifted-identity", c=1.0, d=2)
    f = HalfspaceClassifier([-1.0, 0.0], 0.0)
    n = 100_000
    data = sample_dataset(m, n, RngStream(6, 0x93))
    risk = estimate_risk(f, m, n, None, data)
    eps_list = [0.5, 1.0]
    curve = in_adv_risk_curve(f, m, eps_list, ManifoldAttackConfig(), n, None, data)
    # optimizer slack: a 1% perturbation error moves the indicator over at most density 1/sqrt(2 pi) of mass
    slack = 0.01 / math.sqrt(2 * math.pi)
    ok = True
    parts = []
    for eps, ina in zip(eps_list, curve):
        lb = theorem1_lower_bound(risk.per_class, [1.0, 1.0], eps, 0.0, m.priors).raw
        adv = estimate_adv_risk(f, m, eps, None, n, None, data)
        tol = 3 * ina.stderr + slack
        joint = 3 * math.hypot(ina.stderr, adv.stderr)
        tight = abs(ina.value - lb) <= tol
        order = risk.value <= ina.value + 3 * math.hypot(risk.stderr, ina.stderr) and ina.value <= adv.value + joint
        ok &= tight and order
        parts.append(f"eps={eps:g}: in-adv {ina.value:.5f} vs bound {lb:.5f} (tol {tol:.4f}), "
                     f"risk {risk.value:.4f} <= {ina.value:.4f} <= adv {adv.value:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    assert verdict("C6 lower-bound tightness", ok, "; ".join(parts) + f"; {elapsed:.0f}s")


def test_c7_attack_oracles(verdict):
    t0 = time.perf_counter()
    gen = RngStream(7, 0x94).generator()
    w = gen.standard_normal(4)
    f = HalfspaceClassifier(w, -0.3)
    X = gen.standard_normal((500, 4)) * 1.5
    y = f.predict(X)
    eps = 1.0
    cfg = PgdConfig(eps)
    res = pgd_l2_batch(f, X, y, cfg)
    margin = np.abs(f.margin(X))
    pgd_agree = np.array_equal(res.success, margin <= eps)
    within = np.all(np.abs(res.perturbation[res.success] - margin[res.success]) <= cfg.step_size + 1e-12)

    A = gen.standard_normal((3, 2))
    b = gen.standard_normal(3)
    wq = gen.standard_normal(3)
    m = ConditionalModel.single(Generator.linear(A, b))
    fq = HalfspaceClassifier(wq, 0.0)
    data = sample_dataset(m, 500, RngStream(7, 0x95))
    mres = manifold_attack_batch(fq, m, data.x, data.labels, data.z, ManifoldAttackConfig(eps=eps))
    qp = qp_linear_halfspace_distance(A, b, wq, 0.0, data.x, data.labels)
    disagree = float(np.mean(mres.success(eps) != (qp <= eps)))
    elapsed = time.perf_counter() - t0
    ok = pgd_agree and within and disagree <= 0.02 and elapsed < 300
    detail = (f"PGD agrees with margin oracle on {int(np.sum(res.success == (margin <= eps)))}/500, "
              f"perturbation within one step: {bool(within)}; manifold vs QP disagreement {disagree:.3f} <= 0.02; "
              f"{elapsed:.0f}s")
    assert verdict("C7 attack oracles", ok, detail)


def test_c8_gradient_checks(verdict):
    checks = gradient_checks()
    worst = max(float(c.observed) for c in checks)
    bad = [c.name for c in checks if not c.passed]
    detail = f"{len(checks)} checks, worst relative error {worst:.2g} <= 1e-4, failures {bad or 'none'}"
    assert verdict("C8 gradient checks", not bad, detail)


@pytest.mark.slow
def test_c9_gap_demonstration(verdict):
    t0 = time.perf_counter()
    m = make_synthetic("mlp-random", sizes=(2, 8, 4), activation="tanh", K=2, seed=2)
    lip = estimate_all_classes(m, LipschitzConfig(1000, 2000, 0.5, 0.001, 0))
    l_max = float(lip.values.max())
    eps_list = [0.1, 0.2, 0.4]
    assert 0.5 * l_max >= max(eps_list)
    ok = True
    parts = []
    for seed in (0, 1):
        f = train(Architecture((16,)), m, TrainConfig(method="adv-train", epochs=20, eps_train=0.2, seed=seed))
        data = sample_dataset(m, 2000, RngStream(90 + seed, 0x96))
        risk = estimate_risk(f, m, 0, None, data)
        alpha = float(risk.per_class.min())
        if alpha <= 0:
            ok = False
            parts.append(f"seed {seed}: a class has zero risk, no tilde-family alpha")
            continue
        curve = in_adv_risk_curve(f, m, eps_list, ManifoldAttackConfig(), 0, None, data)
        for eps, ina in zip(eps_list, curve):
            adv = estimate_adv_risk(f, m, eps, None, 0, None, data)
            bound = theorem2_bound(BoundParams(eps, alpha, l_max, tuple(m.priors), 0.001, "tilde")).raw
            rob, in_rob = 1 - adv.value, 1 - ina.value
            ok &= rob <= in_rob <= bound
            parts.append(f"seed {seed} eps={eps:g}: {rob:.3f} <= {in_rob:.3f} <= {bound:.3f}")
    elapsed = time.perf_counter() - t0
    detail = f"L_max {l_max:.3f}; " + "; ".join(parts) + f"; {elapsed:.0f}s"
    assert verdict("C9 gap demonstration", ok, detail)
