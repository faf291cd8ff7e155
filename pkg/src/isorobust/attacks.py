"""l2 PGD and the on-manifold (latent-space) attack.

The manifold attack minimises ``||G(z) - x|| + lam * L(f(G(z)), y)`` over the
latent ``z`` for a schedule of ``lam`` values chosen by binary search, keeps
the closest misclassified generated point it ever visits, and only then
applies the ``eps`` filter.  Because the search never looks at ``eps``, the
set of samples it breaks grows monotonically with ``eps``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .classify import Classifier, grad_input, loss_and_logit_grad
from .gaussian import RngStream, sample_uniform_ball
from .genmodel import ConditionalModel, Generator, LabeledSample
from .reporting import open_output, schema_line

# evaluation step sizes keyed by eps (generated-data PGD settings)
PGD_STEP_TABLE = {1.0: 0.1, 2.0: 0.3, 3.0: 0.5}


def default_pgd_step(eps: float) -> float:
    return PGD_STEP_TABLE.get(float(eps), eps / 10.0)


@dataclass(frozen=True)
class PgdConfig:
    eps: float
    step_size: float | None = None
    steps: int = 100
    loss_kind: str = "cross-entropy"
    random_starts: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.step_size is None:
            object.__setattr__(self, "step_size", default_pgd_step(self.eps))
        if not (self.eps > 0 and self.step_size > 0 and self.steps >= 1):
            raise ValueError("PGD needs positive eps, step size and step count")


@dataclass(frozen=True)
class ManifoldAttackConfig:
    eps: float = 1.0
    lambda_init: float = 1.0
    search_rounds: int = 5
    lambda_lo: float = 1e-3
    lambda_hi: float = 1e3
    lr: float = 0.01
    max_iterations: int = 10000
    init: str = "optimize"          # "optimize" or "recorded-z"
    loss_kind: str = "cw-margin"
    optimizer: str = "adam"         # "adam" or "gd"
    patience: int = 200             # stop a lambda round after this many non-improving steps
    init_iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0 or self.lr <= 0 or self.max_iterations < 1 or self.search_rounds < 1:
            raise ValueError("manifold attack needs eps >= 0 and positive budgets")
        if not 0 < self.lambda_lo <= self.lambda_init <= self.lambda_hi:
            raise ValueError("need lambda_lo <= lambda_init <= lambda_hi, all positive")
        if self.init not in ("optimize", "recorded-z"):
            raise ValueError("init must be 'optimize' or 'recorded-z'")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        if self.loss_kind not in ("cw-margin", "cross-entropy"):
            raise ValueError("loss_kind must be 'cw-margin' or 'cross-entropy'")


@dataclass
class AttackOutcome:
    success: bool
    perturbation: float
    x_adv: np.ndarray
    z_adv: np.ndarray | None = None
    iterations: int = 0
    lambda_final: float | None = None
    diagnostic: str | None = None


@dataclass
class PgdResult:
    success: np.ndarray
    perturbation: np.ndarray
    x_adv: np.ndarray
    iterations: np.ndarray
    diagnostics: list = field(default_factory=list)


def project_l2(center: np.ndarray, pts: np.ndarray, eps: float) -> np.ndarray:
    """Project rows of ``pts`` onto ``B(center, eps)``; the result is never outside."""
    delta = pts - center
    norms = np.linalg.norm(delta, axis=-1)
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    out = center + delta * scale[..., None]
    over = np.linalg.norm(out - center, axis=-1) > eps
    shrink = 1.0
    while np.any(over):
        shrink *= 1.0 - 1e-15 * 8
        out[over] = center[over] + (out[over] - center[over]) * shrink
        over = np.linalg.norm(out - center, axis=-1) > eps
    return out


def _ascent_direction(f: Classifier, x, y, loss_kind):
    g = grad_input(f, x, y, loss_kind)
    # cw-margin is positive while correct, so ascend its negation
    return -g if loss_kind == "cw-margin" else g


def pgd_l2_batch(f: Classifier, X, y, cfg: PgdConfig, early_stop: bool = True) -> PgdResult:
    """Normalised-gradient ascent with projection onto ``B(x, eps)``, per row.

    With ``early_stop`` a row freezes as soon as it is misclassified, so a
    clean error needs zero iterations.  Rows whose gradient is non-finite are
    abandoned with a diagnostic.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    B = X.shape[0]
    diags: list = [None] * B
    xa, iters = _pgd_run(f, X, X.copy(), y, cfg, early_stop, diags)
    success = f.predict(xa) != y if B else np.zeros(0, bool)

    for r in range(1, cfg.random_starts + 1):
        retry = np.flatnonzero(~success)
        if retry.size == 0:
            break
        gen = RngStream(cfg.seed, 0x31, (r,)).generator()
        starts = np.array([sample_uniform_ball(X[i], cfg.eps, gen) for i in retry])
        sub_diags: list = [None] * retry.size
        xr, it_r = _pgd_run(f, X[retry], starts, y[retry], cfg, early_stop, sub_diags)
        won = f.predict(xr) != y[retry]
        xa[retry[won]] = xr[won]
        iters[retry] += it_r
        success[retry[won]] = True

    pert = np.linalg.norm(xa - X, axis=1)
    success &= pert <= cfg.eps
    return PgdResult(success, pert, xa, iters, diags)


def _pgd_run(f, X, xa, y, cfg, early_stop, diags):
    B = X.shape[0]
    iters = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    if early_stop and B:
        active &= f.predict(xa) == y
    for _ in range(cfg.steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = _ascent_direction(f, xa[idx], y[idx], cfg.loss_kind)
        bad = ~np.all(np.isfinite(g), axis=1)
        for k in idx[bad]:
            diags[k] = "non-finite gradient; sample abandoned"
        norms = np.linalg.norm(g, axis=1)
        # zero gradient: the iterate can never move again
        stuck = bad | (norms == 0)
        active[idx[stuck]] = False
        keep = ~stuck
        idx, g, norms = idx[keep], g[keep], norms[keep]
        if idx.size == 0:
            break
        xa[idx] = project_l2(X[idx], xa[idx] + cfg.step_size * g / norms[:, None], cfg.eps)
        iters[idx] += 1
        if early_stop:
            done = f.predict(xa[idx]) != y[idx]
            active[idx[done]] = False
    return xa, iters


def pgd_l2(f: Classifier, x, label: int, cfg: PgdConfig) -> AttackOutcome:
    res = pgd_l2_batch(f, np.asarray(x, dtype=float)[None, :], [label], cfg)
    return AttackOutcome(bool(res.success[0]), float(res.perturbation[0]), res.x_adv[0],
                         iterations=int(res.iterations[0]), diagnostic=res.diagnostics[0])


# ---------------------------------------------------------------------------
# latent initialisation

def manifold_init_batch(g: Generator, X, Z0, max_iterations: int = 10000, tol: float = 1e-13):
    """Minimise ``0.5 ||g(z) - x||^2`` row-wise by gradient descent with Armijo backtracking.

    Returns ``(z, distance)``.  Stops per row at a stationary point
    (gradient norm below ``tol``) or when a step no longer decreases the
    objective.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.array(np.atleast_2d(Z0), dtype=float)
    B = z.shape[0]
    step = np.ones(B)
    active = np.ones(B, dtype=bool)

    def objective(zz, xx):
        r = g.forward(zz) - xx
        return 0.5 * np.sum(r * r, axis=1)

    for _ in range(max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xi = X[idx]
        gen_x, grad = g.forward_vjp(z[idx], lambda out: out - xi)
        r = gen_x - xi
        h = 0.5 * np.sum(r * r, axis=1)
        gn2 = np.sum(grad * grad, axis=1)
        conv = np.sqrt(gn2) <= tol
        t = step[idx].copy()
        accepted = conv.copy()
        znew = z[idx].copy()
        for _ in range(80):
            todo = np.flatnonzero(~accepted)
            if todo.size == 0:
                break
            trial = z[idx[todo]] - t[todo, None] * grad[todo]
            ht = objective(trial, xi[todo])
            ok = ht <= h[todo] - 1e-4 * t[todo] * gn2[todo]
            znew[todo[ok]] = trial[ok]
            accepted[todo[ok]] = True
            t[todo[~ok]] *= 0.5
        # backtracking exhausted: no representable descent left
        stalled = ~accepted
        moved = accepted & ~conv
        z[idx[moved]] = znew[moved]
        step[idx] = np.minimum(t * 2.0, 1e6)
        active[idx[conv | stalled]] = False
    dist = np.linalg.norm(g.forward(z) - X, axis=1)
    return z, dist


def manifold_init(g: Generator, x, strategy: str, rng=None, z_star=None, max_iterations: int = 10000):
    """Starting latent for the manifold attack.

    ``"recorded-z"`` returns ``z_star`` unchanged; ``"optimize"`` runs
    :func:`manifold_init_batch` from a standard-normal draw of ``rng``.
    Returns ``(z, distance)``.
    """
    x = np.asarray(x, dtype=float)
    if strategy == "recorded-z":
        if z_star is None:
            raise ValueError("recorded-z initialisation needs the generating latent")
        z = np.array(z_star, dtype=float)
        return z, float(np.linalg.norm(g.forward(z) - x))
    if strategy != "optimize":
        raise ValueError(f"unknown init strategy {strategy!r}")
    gen = RngStream(0).generator() if rng is None else (rng.generator() if isinstance(rng, RngStream) else rng)
    z0 = gen.standard_normal(g.latent_dim)
    z, dist = manifold_init_batch(g, x[None, :], z0[None, :], max_iterations)
    return z[0], float(dist[0])


# ---------------------------------------------------------------------------
# manifold attack

@dataclass
class ManifoldResult:
    """Per-row search results before the eps filter."""

    found: np.ndarray          # any misclassified generated point seen
    best_perturbation: np.ndarray
    z_best: np.ndarray
    x_best: np.ndarray
    iterations: np.ndarray
    lambda_final: np.ndarray
    diagnostics: list

    def success(self, eps: float) -> np.ndarray:
        return self.found & (self.best_perturbation <= eps)


def _lagrangian_grad(f, y, lam, loss_kind, X):
    """Build the image-space cotangent of ``||x' - x|| + lam * L`` and record side values."""
    box = {}

    def cot(xg):
        logits = f.logits(xg)
        loss, gl = loss_and_logit_grad(logits, y, loss_kind)
        if loss_kind == "cw-margin":
            # hinge at zero margin: no push once the point is misclassified
            gl = gl * (loss > 0)[:, None]
            L = np.maximum(loss, 0.0)
        else:
            gl, L = -gl, -loss
        diff = xg - X
        dist = np.linalg.norm(diff, axis=1)
        unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
        box["pred"] = np.argmax(logits, axis=1)
        box["dist"] = dist
        box["obj"] = dist + lam * L
        return unit + lam[:, None] * f.logits_backward(xg, gl)

    return cot, box


def manifold_search(f: Classifier, g: Generator, X, y, Z0, cfg: ManifoldAttackConfig) -> ManifoldResult:
    """Binary search over ``lam`` with ``cfg.search_rounds`` rounds, all rows in lockstep.

    Each round restarts from ``Z0``.  On success ``lam`` halves (or bisects
    in log space once a failing value is known); on failure it doubles (or
    bisects).  ``lam`` is clipped to ``[lambda_lo, lambda_hi]``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    B = X.shape[0]
    lam = np.full(B, float(cfg.lambda_init))
    lo = np.full(B, np.nan)
    hi = np.full(B, np.nan)
    found_any = np.zeros(B, dtype=bool)
    best = np.full(B, np.inf)
    z_best = Z0.copy()
    iters = np.zeros(B, dtype=int)
    lam_used = lam.copy()
    diags: list = [None] * B

    for _ in range(cfg.search_rounds):
        lam_used = lam.copy()
        found = _search_round(f, g, X, y, Z0, lam, cfg, best, z_best, iters, diags)
        found_any |= found
        hi = np.where(found, lam, hi)
        lo = np.where(found, lo, lam)
        bracket = ~np.isnan(lo) & ~np.isnan(hi)
        lam = np.where(bracket, np.sqrt(lo * hi), np.where(found, lam * 0.5, lam * 2.0))
        lam = np.clip(lam, cfg.lambda_lo, cfg.lambda_hi)

    x_best = g.forward(z_best) if B else np.zeros((0, g.out_dim))
    return ManifoldResult(found_any, best, z_best, x_best, iters, lam_used, diags)


def _search_round(f, g, X, y, Z0, lam, cfg, best, z_best, iters, diags):
    """One fixed-``lam`` descent from ``Z0``; updates ``best``/``z_best``/``iters`` in place.

    Works on a compacted copy of the still-active rows, re-compacting when a
    quarter of them have stopped.
    """
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    B = X.shape[0]
    found = np.zeros(B, dtype=bool)
    rows = np.arange(B)
    z = Z0.copy()
    m1 = np.zeros_like(z)
    m2 = np.zeros_like(z)
    Xw, yw, lw = X, y, lam
    best_obj = np.full(B, np.inf)
    stall = np.zeros(B, dtype=int)
    live = np.ones(B, dtype=bool)
    for t in range(1, cfg.max_iterations + 2):
        if not live.all():
            if not live.any():
                break
            if live.sum() < 0.75 * live.size:
                rows, z, m1, m2 = rows[live], z[live], m1[live], m2[live]
                Xw, yw, lw = Xw[live], yw[live], lw[live]
                best_obj, stall = best_obj[live], stall[live]
                live = np.ones(rows.size, dtype=bool)
        cot, box = _lagrangian_grad(f, yw, lw, cfg.loss_kind, Xw)
        try:
            _, gz = g.forward_vjp(z, cot)
        except FloatingPointError as exc:
            for k in rows[live]:
                diags[k] = f"lambda={lam[k]:.4g}: {exc}"
            break
        adv = (box["pred"] != yw) & live
        dist = box["dist"]
        better = adv & (dist < best[rows])
        if better.any():
            best[rows[better]] = dist[better]
            z_best[rows[better]] = z[better]
        found[rows[adv]] = True
        # the last pass only scores the final iterate
        if t == cfg.max_iterations + 1:
            break
        obj = box["obj"]
        bad = live & ~(np.isfinite(obj) & np.all(np.isfinite(gz), axis=1))
        for k in rows[bad]:
            diags[k] = f"lambda={lam[k]:.4g}: non-finite objective; branch aborted"
        improved = obj < best_obj - 1e-7 * np.maximum(1.0, np.abs(obj))
        best_obj = np.where(improved, obj, best_obj)
        stall = np.where(improved, 0, stall + 1)
        if cfg.optimizer == "adam":
            m1 = b1 * m1 + (1 - b1) * gz
            m2 = b2 * m2 + (1 - b2) * gz * gz
            upd = cfg.lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + eps_adam)
        else:
            upd = cfg.lr * gz
        move = live & ~bad
        z = np.where(move[:, None], z - upd, z)
        iters[rows[move]] += 1
        live &= ~bad & (stall < cfg.patience)
    return found


def initial_latents(g: Generator, X, Zstar, cfg: ManifoldAttackConfig, sample_ids=None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if cfg.init == "recorded-z":
        if Zstar is None:
            raise ValueError("recorded-z initialisation needs the generating latents")
        return np.array(np.atleast_2d(Zstar), dtype=float)
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    starts = np.array([RngStream(cfg.seed, 0x41, (int(i),)).generator().standard_normal(g.latent_dim) for i in ids])
    z, _ = manifold_init_batch(g, X, starts.reshape(X.shape[0], g.latent_dim), cfg.init_iterations)
    return z


def manifold_attack_batch(f: Classifier, m: ConditionalModel, X, labels, Zstar, cfg: ManifoldAttackConfig,
                          sample_ids=None) -> ManifoldResult:
    """Run :func:`manifold_search` per class on the class-conditional generator.

    A row whose clean point is already misclassified succeeds at distance 0
    with its generating latent, without any search.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    B = X.shape[0]
    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    Zstar = None if Zstar is None else np.atleast_2d(np.asarray(Zstar, dtype=float))
    d = m.latent_dim
    out = ManifoldResult(np.zeros(B, bool), np.full(B, np.inf), np.zeros((B, d)), np.zeros((B, m.out_dim)),
                         np.zeros(B, int), np.full(B, np.nan), [None] * B)
    clean_wrong = (f.predict(X) != labels) if B else np.zeros(0, bool)
    if Zstar is not None:
        cw = np.flatnonzero(clean_wrong)
        out.found[cw] = True
        out.best_perturbation[cw] = 0.0
        out.z_best[cw] = Zstar[cw]
        out.x_best[cw] = X[cw]
        todo_mask = ~clean_wrong
    else:
        todo_mask = np.ones(B, bool)
    for c, g in enumerate(m.generators):
        rows = np.flatnonzero(todo_mask & (labels == c))
        if rows.size == 0:
            continue
        z0 = initial_latents(g, X[rows], None if Zstar is None else Zstar[rows], cfg, ids[rows])
        res = manifold_search(f, g, X[rows], labels[rows], z0, cfg)
        out.found[rows] = res.found
        out.best_perturbation[rows] = res.best_perturbation
        out.z_best[rows] = res.z_best
        out.x_best[rows] = res.x_best
        out.iterations[rows] = res.iterations
        out.lambda_final[rows] = res.lambda_final
        for k, r in enumerate(rows):
            out.diagnostics[r] = res.diagnostics[k]
    # re-verify every claimed success on the recomputed generated point
    for r in np.flatnonzero(out.found):
        x_adv = m.generators[labels[r]].forward(out.z_best[r])
        pert = float(np.linalg.norm(x_adv - X[r]))
        if f.predict(x_adv) == labels[r]:
            out.found[r] = False
            out.best_perturbation[r] = np.inf
            out.diagnostics[r] = "success failed re-verification"
        else:
            out.x_best[r] = x_adv
            out.best_perturbation[r] = pert
    return out


def manifold_attack(f: Classifier, m: ConditionalModel, sample: LabeledSample, cfg: ManifoldAttackConfig,
                    sample_id: int = 0) -> AttackOutcome:
    res = manifold_attack_batch(f, m, sample.x[None, :], [sample.label], np.asarray(sample.z)[None, :], cfg,
                                sample_ids=[sample_id])
    ok = bool(res.success(cfg.eps)[0])
    pert = float(res.best_perturbation[0])
    lam = float(res.lambda_final[0])
    return AttackOutcome(ok, pert, res.x_best[0], res.z_best[0], int(res.iterations[0]),
                         None if math.isnan(lam) else lam, res.diagnostics[0])


# ---------------------------------------------------------------------------
# traces

TRACE_COLUMNS = ["sample_id", "attack", "success", "perturbation", "iterations", "lambda_final"]


def write_trace_csv(path, rows) -> None:
    with open_output(path) as fh:
        fh.write(schema_line("attack-trace"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            lam = r.get("lambda_final")
            w.writerow([r["sample_id"], r["attack"], int(bool(r["success"])), repr(float(r["perturbation"])),
                        int(r["iterations"]), "" if lam is None or (isinstance(lam, float) and math.isnan(lam)) else repr(float(lam))])
