"""Closed-form adversarial-risk lower bounds and intrinsic-robustness upper bounds.

Two classifier families are supported:

* ``"alpha"``: classifiers whose overall risk is at least ``alpha``.  The bound
  concentrates all tolerated error in one class (``alpha / p_i`` in class
  ``i``, zero elsewhere) and takes the worst class.
* ``"tilde"``: classifiers whose risk is at least ``alpha`` in every class.

Raw values are kept unclamped; the F_alpha and F~_alpha bounds may exceed 1
by up to ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import isoperimetric_expand, std_normal_cdf, std_normal_quantile
from .reporting import write_csv

VARIANTS = ("alpha", "tilde")


@dataclass(frozen=True)
class BoundValue:
    raw: float
    argmin_class: int | None = None

    @property
    def clamped(self) -> float:
        return float(min(1.0, max(0.0, self.raw)))

    def __float__(self):
        return self.raw


@dataclass(frozen=True)
class BoundParams:
    eps: float
    alpha: float
    l_max: float
    priors: tuple[float, ...]
    delta: float = 0.0
    variant: str = "tilde"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if not self.l_max > 0:
            raise ValueError("Lipschitz constant must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        p = np.asarray(self.priors, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ValueError("priors must be non-negative and sum to 1")
        if self.variant == "alpha" and np.any(self.alpha > p):
            bad = int(np.argmax(self.alpha > p))
            raise ValueError(f"alpha / p_i > 1 for class {bad}; the F_alpha bound requires alpha <= p_i")
        object.__setattr__(self, "priors", tuple(float(x) for x in p))


def uniform_priors(k: int) -> tuple[float, ...]:
    return tuple([1.0 / k] * k)


def _check_hypothesis(eps, lipschitz, radius):
    if radius is None:
        return
    for i, L in enumerate(np.atleast_1d(lipschitz)):
        if radius * L < eps:
            raise ValueError(f"class {i}: r * L_i(r) = {radius * L!r} < eps = {eps!r}; Lipschitz radius too small")


def theorem1_lower_bound(risks, lipschitz, eps: float, delta: float, priors, radius: float | None = None) -> BoundValue:
    """``sum_i p_i Phi(Phi^-1(risk_i) + eps / L_i) - delta``.

    When ``radius`` is given the hypothesis ``r * L_i >= eps`` is enforced.
    A zero per-class risk contributes 0 and a unit risk contributes ``p_i``.
    """
    risks = np.asarray(risks, dtype=float)
    lipschitz = np.broadcast_to(np.asarray(lipschitz, dtype=float), risks.shape)
    priors = np.asarray(priors, dtype=float)
    if not (risks.shape == priors.shape):
        raise ValueError("risks, Lipschitz constants and priors must have equal length")
    if np.any(lipschitz <= 0):
        raise ValueError("Lipschitz constants must be positive")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_hypothesis(eps, lipschitz, radius)
    expanded = np.asarray(isoperimetric_expand(risks, eps / lipschitz))
    return BoundValue(float(np.sum(priors * expanded) - delta))


def allocation_objective(alloc, priors, eta: float):
    """``sum_i p_i Phi(Phi^-1(alpha_i) + eta)`` over the last axis of ``alloc``."""
    alloc = np.clip(np.asarray(alloc, dtype=float), 0.0, 1.0)
    vals = std_normal_cdf(np.asarray(std_normal_quantile(alloc)) + eta)
    return np.sum(np.asarray(priors) * vals, axis=-1)


def theorem2_bound(params: BoundParams, radius: float | None = None) -> BoundValue:
    """Upper bound on intrinsic robustness for the chosen classifier family."""
    _check_hypothesis(params.eps, params.l_max, radius)
    eta = params.eps / params.l_max
    p = np.asarray(params.priors)
    if params.variant == "tilde":
        term = float(np.sum(p * isoperimetric_expand(params.alpha, eta)))
        return BoundValue(1.0 + params.delta - term)
    per_class = np.zeros_like(p)
    pos = p > 0
    per_class[pos] = p[pos] * np.asarray(isoperimetric_expand(params.alpha / p[pos], eta))
    # a class with zero prior cannot host any error mass
    per_class[~pos] = np.inf
    k = int(np.argmin(per_class))
    return BoundValue(1.0 + params.delta - float(per_class[k]), argmin_class=k)


def simplex_brute_force_min(alpha: float, priors, eta: float, step: float = 1e-3):
    """Exhaustive grid minimum of the allocation objective on ``sum p_i a_i = alpha``.

    The first ``K - 1`` coordinates run over ``{0, step, 2 step, ...}`` plus
    their feasible upper endpoint; the last is solved from the constraint.
    Ties break on the lexicographically smallest allocation.  Only ``K <= 3``.
    """
    p = np.asarray(priors, dtype=float)
    K = p.shape[0]
    if K > 3:
        raise ValueError("brute-force oracle limited to K <= 3")
    if not step > 0:
        raise ValueError("grid step must be positive")
    if K < 1 or p[-1] <= 0:
        raise ValueError("last class must have positive prior")
    if alpha < 0 or alpha > float(np.sum(p)) + 1e-15:
        raise ValueError(f"alpha = {alpha} is infeasible for these priors")

    def axis(pi):
        hi = min(1.0, alpha / pi) if pi > 0 else 1.0
        pts = np.arange(0.0, hi, step)
        return np.unique(np.append(pts, hi))

    axes = [axis(pi) for pi in p[:-1]]
    if axes:
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, K - 1)
    else:
        mesh = np.zeros((1, 0))
    last = (alpha - mesh @ p[:-1]) / p[-1]
    # tolerate rounding at the constraint boundary
    last = np.where(np.abs(last) < 1e-13, 0.0, last)
    last = np.where(np.abs(last - 1) < 1e-13, 1.0, last)
    feasible = (last >= 0) & (last <= 1)
    if not feasible.any():
        raise ValueError(f"alpha = {alpha} is infeasible on this grid")
    alloc = np.column_stack([mesh[feasible], last[feasible]])
    values = allocation_objective(alloc, p, eta)
    best = values.min()
    ties = np.flatnonzero(values == best)
    order = np.lexsort(alloc[ties].T[::-1])
    k = ties[order[0]]
    return float(best), alloc[k]


def corner_value(alpha: float, priors, eta: float) -> tuple[float, int]:
    """Minimum over the K corner allocations ``a_i = alpha / p_i``; returns (value, class)."""
    p = np.asarray(priors, dtype=float)
    vals = np.full(p.shape, np.inf)
    ok = (p > 0) & (alpha <= p)
    vals[ok] = p[ok] * np.asarray(isoperimetric_expand(alpha / p[ok], eta))
    k = int(np.argmin(vals))
    return float(vals[k]), k


def bound_curve(alpha_min: float, alpha_max: float, steps: int, *, eps: float, l_max: float,
                priors, delta: float = 0.0, variant: str = "tilde") -> list[dict]:
    """Bound as a function of alpha, linearly spaced over ``[alpha_min, alpha_max]``."""
    if not 0 < alpha_min <= alpha_max:
        raise ValueError("need 0 < alpha_min <= alpha_max")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    alphas = [alpha_min] if alpha_min == alpha_max or steps == 1 else list(np.linspace(alpha_min, alpha_max, steps))
    rows = []
    for a in alphas:
        b = theorem2_bound(BoundParams(eps, float(a), l_max, tuple(priors), delta, variant))
        rows.append({
            "alpha": float(a), "bound_raw": b.raw, "bound_clamped": b.clamped,
            "variant": variant, "eps": float(eps), "delta": float(delta), "L_max": float(l_max),
        })
    return rows


BOUND_COLUMNS = ["alpha", "bound_raw", "bound_clamped", "variant", "eps", "delta", "L_max"]


def write_bounds_csv(rows, path, **extra) -> None:
    write_csv(path, "bounds", BOUND_COLUMNS, rows, **extra)


def random_bound_cases(rng: np.random.Generator, count: int, k_choices=(2, 3)):
    """Random ``(alpha, priors, eta)`` draws with ``alpha <= min p_i``; used by property checks."""
    for _ in range(count):
        K = int(rng.choice(k_choices))
        p = rng.dirichlet(np.full(K, 2.0))
        p = np.maximum(p, 0.05)
        p /= p.sum()
        alpha = float(rng.uniform(0.01, 0.9) * p.min())
        eta = float(rng.uniform(0.05, 2.0))
        yield alpha, p, eta

