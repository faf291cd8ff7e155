"""Fixed-seed invariant suites behind ``isorobust verify``.

Each check compares an implementation value against an independent oracle
(quadrature, bisection, chi-square radial law, closed-form QP, finite
differences) and reports ``PASS/FAIL <check> <observed> <tolerance>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import nn
from .attacks import ManifoldAttackConfig, PgdConfig, manifold_attack_batch, pgd_l2_batch
from .bounds import (BoundParams, allocation_objective, random_bound_cases, simplex_brute_force_min,
                     theorem1_lower_bound, theorem2_bound)
from .classify import HalfspaceClassifier, NetworkClassifier, grad_input, loss_value
from .gaussian import RngStream, isoperimetric_expand, std_normal_cdf, std_normal_pdf, std_normal_quantile
from .genmodel import ConditionalModel, Generator, make_synthetic, sample_dataset, vjp_latent
from .lipschitz import LipschitzConfig, estimate_local_lipschitz, percentile_rank
from .risk import ball_distance, estimate_adv_risk, estimate_risk, halfspace_distance, in_adv_risk_curve, \
    mc_expansion_measure


@dataclass
class Check:
    name: str
    observed: str
    tolerance: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.observed} {self.tolerance}"


def _close(name, observed, expected, tol) -> Check:
    diff = abs(observed - expected)
    return Check(name, f"{observed:.6g}", f"|x-{expected:.6g}|<={tol:.3g}", bool(diff <= tol))


# ---------------------------------------------------------------------------
# oracles shared with the test-suite

def bisect_quantile(p: float, lo: float = -40.0, hi: float = 40.0) -> float:
    """Invert the CDF by bisection; independent of the rational approximation."""
    if p > 0.5:
        # Phi near 1 cannot resolve x finely; bisect the complement instead
        return -bisect_quantile(1.0 - p, lo, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if std_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def qp_linear_halfspace_distance(A, b, w, w0, x_rows, labels):
    """Exact on-manifold distance to the wrong side of ``w.x + w0`` for ``g(z) = A z + b``.

    Points lie on the manifold, so the problem is minimising ``||A dz||``
    over a half-space in latent space; the answer is the margin divided by
    ``sqrt(w^T P w)`` with ``P`` the projector onto range(A).  Rows that are
    already misclassified get 0.  Class 0 is predicted where ``w.x + w0 >= 0``.
    """
    A = np.asarray(A, dtype=float)
    P = A @ np.linalg.solve(A.T @ A, A.T)
    s = np.asarray(x_rows) @ w + w0
    scale = math.sqrt(float(w @ P @ w))
    labels = np.asarray(labels)
    # label 0 needs s < 0 to err, label 1 needs s >= 0
    need = np.where(labels == 0, s, -s)
    out = np.where(need > 0, need / scale, 0.0)
    if scale == 0:
        out = np.where(need > 0, np.inf, 0.0)
    return out


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------
# suites

def gaussian_checks() -> list[Check]:
    out = []
    for x in (-3.0, -0.7, 0.0, 1.3, 4.0):
        q, _ = integrate.quad(std_normal_pdf, -np.inf, x, epsabs=1e-14, epsrel=1e-13)
        out.append(_close(f"cdf_vs_quadrature[x={x:g}]", float(std_normal_cdf(x)), q, 1e-12))
    worst = 0.0
    for p in (1e-300, 1e-20, 1e-8, 1e-3, 0.1, 0.3, 0.5, 0.7, 0.975, 1 - 1e-9):
        worst = max(worst, abs(float(std_normal_quantile(p)) - bisect_quantile(p)))
    out.append(Check("quantile_vs_bisection", f"{worst:.3g}", "max_abs<=1e-9", worst <= 1e-9))
    ps = np.logspace(-300, np.log10(0.5), 400)
    rt = float(np.max(np.abs(std_normal_cdf(std_normal_quantile(ps)) - ps) / ps))
    out.append(Check("cdf_quantile_roundtrip", f"{rt:.3g}", "max_rel<=1e-12", rt <= 1e-12))
    a, b = 0.3, 0.45
    semi = abs(float(isoperimetric_expand(isoperimetric_expand(0.1, a), b) - isoperimetric_expand(0.1, a + b)))
    out.append(Check("isoperimetric_semigroup", f"{semi:.3g}", "abs<=1e-12", semi <= 1e-12))

    # half-space equality case
    d, p, r, n = 10, 0.1, 0.5, 1_000_000
    normal = np.zeros(d)
    normal[0] = 1.0
    est = mc_expansion_measure(halfspace_distance(normal, float(std_normal_quantile(p))), r, d, n,
                               RngStream(20240101, 1))
    target = float(isoperimetric_expand(p, r))
    out.append(_close("halfspace_equality[p=0.1,r=0.5,d=10]", est.value, target, 3 * est.stderr))

    # centred ball: exact expansion from the chi-square radial law, strictly above the half-space value
    d = 5
    R = math.sqrt(stats.chi2.ppf(p, d))
    exact = float(stats.chi2.cdf((R + r) ** 2, d))
    est = mc_expansion_measure(ball_distance(np.zeros(d), R), r, d, 400_000, RngStream(20240101, 2))
    out.append(_close("ball_expansion_vs_chi2[d=5]", est.value, exact, 3 * est.stderr))
    out.append(Check("ball_inequality[d=5]", f"{est.value:.6g}", f">={target - 3 * est.stderr:.6g}",
                     est.value >= target - 3 * est.stderr))
    return out


def _grid_cell_tolerance(alpha, priors, eta, alloc, step):
    """Largest objective change from moving the argmin by one grid cell along the constraint."""
    p = np.asarray(priors)
    K = p.size
    base = float(allocation_objective(alloc, p, eta))
    worst = 0.0
    for j in range(K - 1):
        for s in (-step, step):
            a = np.array(alloc, dtype=float)
            a[j] += s
            a[-1] = (alpha - a[:-1] @ p[:-1]) / p[-1]
            if np.all(a >= -1e-12) and np.all(a <= 1 + 1e-12):
                worst = max(worst, abs(float(allocation_objective(np.clip(a, 0, 1), p, eta)) - base))
    return max(worst, 1e-12)


def corner_checks(K: int, draws: int = 20, step: float = 1e-3, seed: int = 7) -> list[Check]:
    out = []
    rng = RngStream(seed, 0x70 + K).generator()
    for t, (alpha, priors, eta) in enumerate(random_bound_cases(rng, draws, k_choices=(K,))):
        grid_min, arg = simplex_brute_force_min(alpha, priors, eta, step)
        b = theorem2_bound(BoundParams(eta, alpha, 1.0, tuple(priors), 0.0, "alpha"))
        corner = 1.0 - b.raw
        tol = _grid_cell_tolerance(alpha, priors, eta, arg, step)
        nonzero = int(np.count_nonzero(arg > 1e-12))
        ok = abs(grid_min - corner) <= tol and nonzero <= 1
        out.append(Check(f"corner_optimality[K={K},draw={t}]", f"{grid_min:.6g}/nnz={nonzero}",
                         f"|x-{corner:.6g}|<={tol:.3g},nnz<=1", ok))
    return out


def bounds_checks() -> list[Check]:
    out = []
    worked = theorem2_bound(BoundParams(1.0, 0.05, 1.0, (1.0,), 0.0, "tilde")).raw
    out.append(_close("tilde_bound[alpha=0.05,eps/L=1]", worked, 0.7405, 0.0005))
    out += corner_checks(2)
    out += corner_checks(3)
    rng = RngStream(11, 0x72).generator()
    worst = math.inf
    for alpha, priors, eta in random_bound_cases(rng, 200):
        fa = theorem2_bound(BoundParams(eta, alpha, 1.0, tuple(priors), 0.0, "alpha")).raw
        ft = theorem2_bound(BoundParams(eta, alpha, 1.0, tuple(priors), 0.0, "tilde")).raw
        worst = min(worst, fa - ft)
    out.append(Check("falpha_dominates_ftilde", f"{worst:.3g}", "min(Fa-Ft)>=-1e-12", worst >= -1e-12))
    pri = (0.5, 0.5)
    seq = [theorem2_bound(BoundParams(e, 0.1, 2.0, pri, 0.0)).raw for e in np.linspace(0.1, 4.0, 40)]
    mono = bool(np.all(np.diff(seq) <= 1e-15))
    out.append(Check("bound_nonincreasing_in_eps", f"{max(np.diff(seq)):.3g}", "max_step<=0", mono))
    risks = np.array([0.1, 0.3])
    lb0 = theorem1_lower_bound(risks, [1.0, 2.0], 0.0, 0.01, pri).raw
    out.append(_close("theorem1_at_eps0", lb0, float(risks @ np.array(pri)) - 0.01, 1e-15))
    return out


def lipschitz_checks() -> list[Check]:
    out = []
    cfg = LipschitzConfig(samples=200, neighbors=200, seed=3)
    g = make_synthetic("scaled-identity", c=2.0, d=3).generators[0]
    val = estimate_local_lipschitz(g, cfg)
    out.append(Check("scaled_identity_exact[c=2]", repr(val), "==2.0", val == 2.0))
    diag = Generator.linear(np.diag([3.0, 1.0]))
    val = estimate_local_lipschitz(diag, LipschitzConfig(samples=1000, neighbors=2000, seed=5))
    out.append(Check("diag31_range", f"{val:.6g}", "in[2.9,3.0]", 2.9 <= val <= 3.0 + 1e-12))
    worst = -math.inf
    for t in range(10):
        gen = RngStream(41, 0x73, (t,)).generator()
        A = gen.standard_normal((4, 3))
        smax = float(np.linalg.svd(A, compute_uv=False)[0])
        est = estimate_local_lipschitz(Generator.linear(A), LipschitzConfig(samples=200, neighbors=500, seed=t))
        worst = max(worst, (est - smax) / smax)
    # the image difference g(z') - g(z) carries rounding error, hence a relative slack at float level
    out.append(Check("linear_below_sigma_max[10 draws]", f"{worst:.3g}", "max((L-smax)/smax)<=1e-9", worst <= 1e-9))
    r = percentile_rank(0.001, 1000)
    out.append(Check("percentile_rank[S=1000]", str(r), "==999", r == 999))
    return out


def gradient_checks() -> list[Check]:
    out = []
    for act in ("tanh", "sigmoid", "relu", "identity"):
        gen = RngStream(5, 0x74).generator()
        layers = nn.random_stack((3, 7, 5, 4), act, gen)
        g = Generator(layers)
        z = gen.standard_normal(3)
        u = gen.standard_normal(4)
        fd = finite_difference(lambda zz: float(u @ g.forward(zz)), z)
        e = rel_err(vjp_latent(g, z, u), fd)
        out.append(Check(f"vjp_fd[{act}]", f"{e:.3g}", "rel<=1e-4", e <= 1e-4))
        f = NetworkClassifier(nn.random_stack((4, 6, 3), act, gen))
        x = gen.standard_normal(4)
        for kind in ("cross-entropy", "cw-margin"):
            fd = finite_difference(lambda xx: loss_value(f, xx, 1, kind), x)
            e = rel_err(grad_input(f, x, 1, kind), fd)
            out.append(Check(f"grad_input_fd[{act},{kind}]", f"{e:.3g}", "rel<=1e-4", e <= 1e-4))
    return out


def attack_checks() -> list[Check]:
    out = gradient_checks()
    gen = RngStream(9, 0x75).generator()
    w = gen.standard_normal(5)
    f = HalfspaceClassifier(w, 0.2)
    X = gen.standard_normal((400, 5)) * 1.5
    y = f.predict(X)
    eps = 1.0
    res = pgd_l2_batch(f, X, y, PgdConfig(eps))
    margin = np.abs(f.margin(X))
    agree = float(np.mean(res.success == (margin <= eps)))
    out.append(Check("pgd_margin_oracle_agreement", f"{agree:.4f}", "==1", agree == 1.0))
    gap = float(np.max(np.abs(res.perturbation[res.success] - margin[res.success]))) if res.success.any() else 0.0
    step = PgdConfig(eps).step_size
    out.append(Check("pgd_perturbation_within_step", f"{gap:.3g}", f"<={step:.3g}", gap <= step + 1e-12))

    A = gen.standard_normal((3, 2))
    b = gen.standard_normal(3)
    m = ConditionalModel.single(Generator.linear(A, b))
    wq = gen.standard_normal(3)
    fq = HalfspaceClassifier(wq, 0.0)
    data = sample_dataset(m, 100, RngStream(9, 0x76))
    labels = np.zeros(100, dtype=int)
    qp = qp_linear_halfspace_distance(A, b, wq, 0.0, data.x, labels)
    mres = manifold_attack_batch(fq, m, data.x, labels, data.z, ManifoldAttackConfig(eps=1.0))
    dis = float(np.mean(mres.success(1.0) != (qp <= 1.0)))
    out.append(Check("manifold_qp_oracle_disagreement", f"{dis:.4f}", "<=0.02", dis <= 0.02))

    # equality case of the per-class lower bound: the latent error region is a half-space
    sm = make_synthetic("shifted-identity", c=1.0, d=2)
    hf = HalfspaceClassifier([-1.0, 0.0], 0.0)
    n = 20_000
    data = sample_dataset(sm, n, RngStream(13, 0x77))
    risk = estimate_risk(hf, sm, n, None, data)
    for eps in (0.5,):
        ina = in_adv_risk_curve(hf, sm, [eps], ManifoldAttackConfig(eps=eps, init="recorded-z"), n, None, data)[0]
        lb = theorem1_lower_bound(risk.per_class, [1.0, 1.0], eps, 0.0, sm.priors).raw
        tol = 3 * ina.stderr + 0.01
        out.append(_close(f"lower_bound_tightness[eps={eps:g}]", ina.value, lb, tol))
        adv = estimate_adv_risk(hf, sm, eps, None, n, None, data)
        order = risk.value <= ina.value + 3 * ina.stderr and ina.value <= adv.value + 3 * adv.stderr
        out.append(Check(f"risk_ordering[eps={eps:g}]", f"{risk.value:.4f}<={ina.value:.4f}<={adv.value:.4f}",
                         "3se", order))
    return out


SUITES = {
    "gaussian": gaussian_checks,
    "bounds": bounds_checks,
    "lipschitz": lipschitz_checks,
    "attacks": attack_checks,
}


def run_suite(name: str, emit=print) -> list[Check]:
    if name != "all" and name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    names = list(SUITES) if name == "all" else [name]
    checks = []
    for n in names:
        for c in SUITES[n]():
            emit(c.line())
            checks.append(c)
    return checks
