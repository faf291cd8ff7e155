"""Monte Carlo estimators for risk, adversarial risk and in-distribution adversarial risk.

Attack-based estimates are lower bounds on the true quantity (an attack can
miss an adversarial example that exists), which the ``kind`` field records.
All estimators draw their samples with :func:`genmodel.sample_dataset` from
the given stream, so calling several of them with the same stream evaluates
them on identical samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .attacks import ManifoldAttackConfig, PgdConfig, manifold_attack_batch, pgd_l2_batch
from .classify import Classifier
from .gaussian import as_generator, sample_std_gaussian
from .genmodel import ConditionalModel, Dataset, sample_dataset
from .reporting import write_csv

KINDS = ("risk", "adv_risk_lower", "in_adv_risk_lower", "exact_grid", "expansion")


@dataclass
class RiskEstimate:
    value: float
    n_samples: int
    kind: str
    per_class: np.ndarray | None = None
    indicators: np.ndarray | None = field(default=None, repr=False)

    @property
    def stderr(self) -> float:
        v = self.value
        return math.sqrt(max(v * (1 - v), 0.0) / self.n_samples) if self.n_samples else float("nan")


def _estimate(indicator: np.ndarray, labels: np.ndarray | None, num_classes: int, kind: str) -> RiskEstimate:
    indicator = np.asarray(indicator, dtype=bool)
    per_class = None
    if labels is not None:
        per_class = np.array([
            indicator[labels == c].mean() if np.any(labels == c) else np.nan for c in range(num_classes)
        ])
    return RiskEstimate(float(indicator.mean()), int(indicator.size), kind, per_class, indicator)


def draw(m: ConditionalModel, n: int, rng) -> Dataset:
    if n < 1:
        raise ValueError("need at least one sample")
    return sample_dataset(m, n, rng)


def estimate_risk(f: Classifier, m: ConditionalModel, n: int, rng, data: Dataset | None = None) -> RiskEstimate:
    data = draw(m, n, rng) if data is None else data
    wrong = f.predict(data.x) != data.labels
    return _estimate(wrong, data.labels, m.num_classes, "risk")


def estimate_adv_risk(f: Classifier, m: ConditionalModel, eps: float, pgd: PgdConfig | None, n: int, rng,
                      data: Dataset | None = None) -> RiskEstimate:
    """Fraction of samples PGD breaks within ``eps``; ``eps = 0`` reduces to the risk."""
    data = draw(m, n, rng) if data is None else data
    if eps == 0:
        wrong = f.predict(data.x) != data.labels
        return _estimate(wrong, data.labels, m.num_classes, "adv_risk_lower")
    pgd = PgdConfig(eps) if pgd is None else replace(pgd, eps=eps)
    res = pgd_l2_batch(f, data.x, data.labels, pgd)
    return _estimate(res.success, data.labels, m.num_classes, "adv_risk_lower")


def estimate_in_adv_risk(f: Classifier, m: ConditionalModel, eps: float, cfg: ManifoldAttackConfig | None, n: int,
                         rng, data: Dataset | None = None) -> RiskEstimate:
    """Fraction of samples the manifold attack breaks within ``eps``."""
    return in_adv_risk_curve(f, m, [eps], cfg, n, rng, data)[0]


def in_adv_risk_curve(f: Classifier, m: ConditionalModel, eps_list, cfg: ManifoldAttackConfig | None, n: int, rng,
                      data: Dataset | None = None) -> list[RiskEstimate]:
    """One manifold search, filtered at every ``eps`` in ``eps_list``."""
    data = draw(m, n, rng) if data is None else data
    cfg = ManifoldAttackConfig() if cfg is None else cfg
    res = manifold_attack_batch(f, m, data.x, data.labels, data.z, cfg)
    return [_estimate(res.success(e), data.labels, m.num_classes, "in_adv_risk_lower") for e in eps_list]


def brute_force_in_adv_verdicts(f: Classifier, m: ConditionalModel, eps: float, data: Dataset,
                                bound: float = 5.0, step: float = 0.01) -> np.ndarray:
    """Per-sample grid verdict: is some grid latent ``z'`` with ``g(z')`` in ``B(x, eps)`` misclassified?"""
    d = m.latent_dim
    if d > 2:
        raise ValueError("grid oracle limited to latent dimension <= 2")
    axis = np.arange(-bound, bound + step / 2, step)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    verdict = np.zeros(len(data), dtype=bool)
    for c, g in enumerate(m.generators):
        rows = np.flatnonzero(data.labels == c)
        if rows.size == 0:
            continue
        imgs = g.forward(grid)
        err = imgs[f.predict(imgs) != c]
        if err.shape[0] == 0:
            continue
        for r in rows:
            verdict[r] = bool(np.any(np.sum((err - data.x[r]) ** 2, axis=1) <= eps * eps))
    return verdict


def brute_force_in_adv_risk(f: Classifier, m: ConditionalModel, eps: float, n: int, rng,
                            bound: float = 5.0, step: float = 0.01, data: Dataset | None = None) -> RiskEstimate:
    data = draw(m, n, rng) if data is None else data
    v = brute_force_in_adv_verdicts(f, m, eps, data, bound, step)
    return _estimate(v, data.labels, m.num_classes, "exact_grid")


# ---------------------------------------------------------------------------
# Gaussian expansion measure

def mc_expansion_measure(distance: Callable[[np.ndarray], np.ndarray], r: float, d: int, n: int, rng,
                         chunk: int = 200_000) -> RiskEstimate:
    """Monte Carlo estimate of ``nu_d(E_r)`` given the distance-to-``E`` function."""
    if r < 0:
        raise ValueError("expansion radius must be non-negative")
    gen = as_generator(rng)
    hits = 0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        z = sample_std_gaussian(d, gen, size=k)
        hits += int(np.count_nonzero(np.asarray(distance(z)) <= r))
        done += k
    return RiskEstimate(hits / n, n, "expansion")


def halfspace_distance(normal, offset: float):
    """Distance to ``{z : normal . z <= offset}``."""
    normal = np.asarray(normal, dtype=float)
    nn = np.linalg.norm(normal)
    return lambda z: np.maximum((z @ normal - offset) / nn, 0.0)


def ball_distance(center, radius: float):
    center = np.asarray(center, dtype=float)
    return lambda z: np.maximum(np.linalg.norm(z - center, axis=1) - radius, 0.0)


def slab_distance(normal, lo: float, hi: float):
    """Distance to ``{z : lo <= normal . z <= hi}``."""
    normal = np.asarray(normal, dtype=float)
    nn = np.linalg.norm(normal)

    def dist(z):
        s = z @ normal / nn
        return np.maximum(np.maximum(lo / nn - s, s - hi / nn), 0.0)

    return dist


ROBUSTNESS_COLUMNS = ["quantity", "kind", "value", "stderr", "n", "eps", "classifier_id", "model_id", "seed"]


def report_row(quantity: str, est: RiskEstimate, eps, classifier_id: str, model_id: str, seed: int) -> dict:
    return {
        "quantity": quantity, "kind": est.kind, "value": float(est.value), "stderr": float(est.stderr),
        "n": est.n_samples, "eps": None if eps is None else float(eps), "classifier_id": classifier_id,
        "model_id": model_id, "seed": seed,
    }


def write_robustness_csv(rows, path) -> None:
    write_csv(path, "robustness", ROBUSTNESS_COLUMNS, rows)
