"""Standard-normal CDF/quantile, the isoperimetric expansion map, and seeded samplers.

Every Monte Carlo estimate in the package draws from an :class:`RngStream`, a
(seed, stream-id) pair that is turned into a fresh numpy ``Generator`` on
demand.  Two calls with the same stream therefore see the same numbers no
matter what else ran in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

__all__ = [
    "RngStream",
    "as_generator",
    "std_normal_cdf",
    "std_normal_pdf",
    "std_normal_quantile",
    "isoperimetric_expand",
    "sample_std_gaussian",
    "sample_uniform_ball",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by ``(seed, stream, path)``.

    ``path`` holds sub-stream keys appended by :meth:`substream`; it lets a
    worker derive one independent stream per sample without coordination.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for v in (self.seed, self.stream, *self.path):
            if not (0 <= int(v) <= _MASK64):
                raise ValueError(f"stream keys must be unsigned 64-bit integers, got {v}")

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), *self.path))
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a numpy Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def std_normal_cdf(x):
    """Phi(x).  Accepts scalars or arrays; +-inf map to 1/0."""
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return float(out) if out.ndim == 0 else out


# Wichura (1988), algorithm AS241 PPND16.  Coefficients in ascending powers.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coefs, r):
    acc = np.zeros_like(r) + coefs[-1]
    for c in reversed(coefs[:-1]):
        acc = acc * r + c
    return acc


def _lower_quantile(p):
    """Quantile for 0 < p <= 0.5 (array); rational approximation plus one Newton step."""
    q = p - 0.5
    x = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if central.any():
        qc = q[central]
        r = 0.180625 - qc * qc
        x[central] = qc * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    if tail.any():
        r = np.sqrt(-np.log(p[tail]))
        near = r <= 5.0
        xt = np.empty_like(r)
        rn = r[near] - 1.6
        xt[near] = _poly(_C, rn) / _poly(_D, rn)
        rf = r[~near] - 5.0
        xt[~near] = _poly(_E, rf) / _poly(_F, rf)
        x[tail] = -xt
    # Newton refinement on the CDF; p <= 0.5 keeps Phi(x) - p well conditioned.
    dens = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    ok = dens > 0
    x[ok] -= (ndtr(x[ok]) - p[ok]) / dens[ok]
    return x


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf`; quantile(0) = -inf and quantile(1) = +inf."""
    arr = np.asarray(p, dtype=float)
    if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
        raise ValueError("probability must lie in [0, 1]")
    flat = np.atleast_1d(arr).astype(float).ravel()
    out = np.empty_like(flat)
    out[flat == 0.0] = -np.inf
    out[flat == 1.0] = np.inf
    inner = (flat > 0.0) & (flat < 1.0)
    lower = inner & (flat <= 0.5)
    upper = inner & (flat > 0.5)
    if lower.any():
        out[lower] = _lower_quantile(flat[lower])
    if upper.any():
        # 1 - p is exact for p in (0.5, 1)
        out[upper] = -_lower_quantile(1.0 - flat[upper])
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def isoperimetric_expand(p, t):
    """Phi(Phi^-1(p) + t): the smallest Gaussian measure an r-expansion can have."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise ValueError("expansion radius must be non-negative")
    out = ndtr(np.asarray(std_normal_quantile(p)) + t_arr)
    return float(out) if np.ndim(out) == 0 else out


def sample_std_gaussian(d: int, rng, size: int | None = None) -> np.ndarray:
    """Draw from N(0, I_d).  Returns shape ``(d,)`` or ``(size, d)``."""
    if d < 1:
        raise ValueError("latent dimension must be at least 1")
    gen = as_generator(rng)
    shape = (d,) if size is None else (int(size), d)
    return gen.standard_normal(shape)


def sample_uniform_ball(center, radius: float, rng, size: int | None = None) -> np.ndarray:
    """Uniform draws from the solid l2 ball ``B(center, radius)``.

    Direction is uniform on the sphere, radial coordinate is ``radius * U**(1/d)``.
    """
    if not radius > 0:
        raise ValueError("ball radius must be positive")
    center = np.asarray(center, dtype=float)
    d = center.shape[-1]
    gen = as_generator(rng)
    m = 1 if size is None else int(size)
    direction = gen.standard_normal((m, d))
    norms = np.linalg.norm(direction, axis=1)
    # a zero direction has probability zero; redraw rather than divide by it
    while np.any(norms == 0):
        bad = norms == 0
        direction[bad] = gen.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(direction, axis=1)
    u = gen.random(m)
    radii = radius * u ** (1.0 / d)
    pts = center + direction * (radii / norms)[:, None]
    return pts[0] if size is None else pts
