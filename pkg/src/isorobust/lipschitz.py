"""Sample-based local Lipschitz estimation of generators over the Gaussian latent law.

For each of ``S`` latent draws ``z_i`` the estimator takes ``N`` neighbours
uniformly from the ball ``B(z_i, r)`` and records the largest stretch ratio
``||g(z') - g(z_i)|| / ||z' - z_i||``.  The reported constant is the
nearest-rank ``(1 - delta)`` percentile of those ``S`` maxima, so it is an
underestimate of the true local constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import RngStream, sample_uniform_ball
from .genmodel import ConditionalModel, Generator


@dataclass(frozen=True)
class LipschitzConfig:
    samples: int = 1000      # S
    neighbors: int = 2000    # N
    radius: float = 0.5      # r, latent l2 units
    delta: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.neighbors < 1:
            raise ValueError("sample and neighbour counts must be at least 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not (0 < self.delta <= 1):
            raise ValueError("delta must lie in (0, 1]")


@dataclass
class LipschitzEstimate:
    values: np.ndarray                 # per-class L_i(r)
    config: LipschitzConfig | None
    maxima: list[np.ndarray] = field(default_factory=list)   # per-class sorted sample maxima

    @property
    def l_max(self) -> float:
        return float(np.max(self.values))


def percentile_rank(delta: float, count: int) -> int:
    """1-based nearest-rank index ``ceil((1 - delta) * count)``, at least 1."""
    # round away float fuzz such as 0.999 * 1000 = 999.0000000000001
    raw = round((1.0 - delta) * count, 9)
    return min(count, max(1, math.ceil(raw)))


def sample_maxima(g: Generator, cfg: LipschitzConfig, stream: int = 0) -> np.ndarray:
    """Per-sample maximum stretch ratios, one entry per latent draw (unsorted)."""
    base = RngStream(cfg.seed, stream)
    d = g.latent_dim
    out = np.empty(cfg.samples)
    for i in range(cfg.samples):
        gen = base.substream(i).generator()
        z = gen.standard_normal(d)
        nbrs = sample_uniform_ball(z, cfg.radius, gen, size=cfg.neighbors)
        steps = np.linalg.norm(nbrs - z, axis=1)
        # a neighbour at the centre gives 0/0; redraw it
        while np.any(steps == 0):
            bad = steps == 0
            nbrs[bad] = sample_uniform_ball(z, cfg.radius, gen, size=int(bad.sum()))
            steps = np.linalg.norm(nbrs - z, axis=1)
        gz = g.forward(z)
        gn = g.forward(nbrs)
        ratios = np.linalg.norm(gn - gz, axis=1) / steps
        if not np.all(np.isfinite(ratios)):
            raise FloatingPointError(f"non-finite stretch ratio at latent sample {i}")
        out[i] = ratios.max()
    return out


def estimate_local_lipschitz(g: Generator, cfg: LipschitzConfig, stream: int = 0) -> float:
    maxima = np.sort(sample_maxima(g, cfg, stream))
    return float(maxima[percentile_rank(cfg.delta, cfg.samples) - 1])


def estimate_all_classes(m: ConditionalModel, cfg: LipschitzConfig) -> LipschitzEstimate:
    """Estimate each class generator on its own stream (stream id = class index)."""
    values, maxima = [], []
    k = percentile_rank(cfg.delta, cfg.samples)
    for i, g in enumerate(m.generators):
        mx = np.sort(sample_maxima(g, cfg, stream=i))
        maxima.append(mx)
        values.append(mx[k - 1])
    return LipschitzEstimate(np.array(values), cfg, maxima)


def estimate_repeated(m: ConditionalModel, cfg: LipschitzConfig, trials: int = 10):
    """Mean and standard deviation of per-class estimates over ``trials`` seeds.

    Trial ``t`` uses seed ``cfg.seed + t``.
    """
    rows = []
    for t in range(trials):
        trial_cfg = LipschitzConfig(cfg.samples, cfg.neighbors, cfg.radius, cfg.delta, cfg.seed + t)
        rows.append(estimate_all_classes(m, trial_cfg).values)
    rows = np.array(rows)
    return rows.mean(axis=0), rows.std(axis=0, ddof=1) if trials > 1 else np.zeros(rows.shape[1])


LIPSCHITZ_COLUMNS = ["class", "L", "r", "delta", "S", "N", "seed"]


def write_lipschitz_csv(est: LipschitzEstimate, path, source: str = "estimated") -> None:
    from .reporting import open_output, schema_line

    cfg = est.config
    with open_output(path) as fh:
        fh.write(schema_line("lipschitz", source=source))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LIPSCHITZ_COLUMNS)
        for i, val in enumerate(est.values):
            if cfg is None:
                w.writerow([i, repr(float(val)), "", "", "", "", ""])
            else:
                w.writerow([i, repr(float(val)), repr(cfg.radius), repr(cfg.delta), cfg.samples, cfg.neighbors, cfg.seed])


def read_lipschitz_csv(path) -> np.ndarray:
    from .reporting import read_csv_rows

    rows = read_csv_rows(path)
    return np.array([float(r["L"]) for r in sorted(rows, key=lambda r: int(r["class"]))])
