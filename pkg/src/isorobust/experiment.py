"""The ``run`` pipeline: model -> Lipschitz -> classifiers -> attacks -> risks -> bounds -> files."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import ManifoldAttackConfig, PgdConfig
from .bounds import BOUND_COLUMNS, BoundParams, bound_curve, theorem1_lower_bound, theorem2_bound, uniform_priors
from .classify import (Architecture, Classifier, ConstantClassifier, HalfspaceClassifier, TrainConfig,
                       load_classifier, train)
from .config import Config, ConfigError
from .gaussian import RngStream
from .genmodel import ConditionalModel, load_model_or_spec
from .lipschitz import LipschitzConfig, LipschitzEstimate, estimate_all_classes, read_lipschitz_csv, write_lipschitz_csv
from .reporting import write_csv
from .risk import (ROBUSTNESS_COLUMNS, RiskEstimate, draw, estimate_adv_risk, estimate_risk, in_adv_risk_curve,
                   report_row)

log = logging.getLogger(__name__)

EVAL_STREAM = 0x51


def worker_count(cap_tasks: int | None = None) -> int:
    env = os.environ.get("ISOROBUST_THREADS", "").strip()
    n = os.cpu_count() or 1
    if env:
        try:
            n = max(1, int(env))
        except ValueError:
            raise ValueError(f"ISOROBUST_THREADS must be an integer, got {env!r}") from None
    if cap_tasks is not None:
        n = max(1, min(n, cap_tasks))
    return n


@dataclass
class ClassifierResult:
    cid: str
    risk: RiskEstimate
    adv: dict = field(default_factory=dict)       # eps -> RiskEstimate
    in_adv: dict = field(default_factory=dict)    # eps -> RiskEstimate


@dataclass
class RunReport:
    config: Config
    lipschitz: LipschitzEstimate
    lipschitz_source: str
    bounds: list
    classifiers: list
    warnings: list
    priors: tuple
    delta: float
    eval_labels: np.ndarray | None = None
    manifest: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# config -> objects

def _model(cfg: Config) -> ConditionalModel | None:
    text = cfg.str("model")
    if not text:
        return None
    p = cfg.resolve_path(text)
    try:
        return load_model_or_spec(str(p) if p.exists() else text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), cfg.lines.get("model"), "model") from exc


def _lipschitz(cfg: Config, model) -> tuple[LipschitzEstimate, str]:
    if cfg.str("lipschitz.values"):
        vals = np.array(cfg.floats("lipschitz.values"))
        if np.any(vals <= 0):
            raise ConfigError("Lipschitz constants must be positive", cfg.lines.get("lipschitz.values"), "lipschitz.values")
        return LipschitzEstimate(vals, None), "injected"
    if cfg.str("lipschitz.file"):
        path = cfg.resolve_path(cfg.str("lipschitz.file"))
        if not path.exists():
            raise ConfigError(f"no such file {path}", cfg.lines.get("lipschitz.file"), "lipschitz.file")
        return LipschitzEstimate(read_lipschitz_csv(path), None), "published" if cfg.str("preset") else "file"
    if model is None:
        raise ConfigError("need a model, lipschitz.values or lipschitz.file", None, "model")
    lc = LipschitzConfig(cfg.int("lipschitz.S"), cfg.int("lipschitz.N"), cfg.float("lipschitz.r"),
                         cfg.float("lipschitz.delta"), cfg.int("seed"))
    return estimate_all_classes(model, lc), "estimated"


def _priors(cfg: Config, model, k: int) -> tuple[float, ...]:
    text = cfg.str("bounds.priors")
    if text in ("", "model"):
        if model is not None:
            return tuple(model.priors)
        return uniform_priors(k)
    if text == "uniform":
        return uniform_priors(k)
    p = cfg.floats("bounds.priors")
    if len(p) != k:
        raise ConfigError(f"{len(p)} priors for {k} classes", cfg.lines.get("bounds.priors"), "bounds.priors")
    return tuple(p)


def build_classifier(cfg: Config, cid: str, model: ConditionalModel | None) -> Classifier:
    spec = cfg.classifier(cid)
    key = f"classifier.{cid}.kind"
    kind = spec["kind"]
    try:
        if kind == "halfspace":
            w = [float(t) for t in spec["w"].split(",")]
            return HalfspaceClassifier(w, float(spec["b"]))
        if kind == "constant":
            if model is None:
                raise ValueError("constant classifier needs a model for its dimensions")
            K = int(spec["classes"]) if spec["classes"] else model.num_classes
            return ConstantClassifier(int(spec["label"]), K, model.out_dim)
        if kind == "file":
            return load_classifier(cfg.resolve_path(spec["path"]))
        if kind == "train":
            if model is None:
                raise ValueError("training needs a model")
            tc = TrainConfig(float(spec["lr"]), int(spec["epochs"]), int(spec["batch_size"]), int(spec["train_size"]),
                             spec["method"], float(spec["eps_train"]), float(spec["pgd_step"]), int(spec["pgd_steps"]),
                             int(spec["seed"]) if spec["seed"] else cfg.int("seed"))
            return train(Architecture.parse(spec["arch"]), model, tc)
    except ValueError as exc:
        raise ConfigError(str(exc), cfg.lines.get(key), key) from exc
    raise ConfigError(f"unknown classifier kind {kind!r} (halfspace, constant, file, train)", cfg.lines.get(key), key)


def _pgd(cfg: Config, eps: float) -> PgdConfig:
    step = cfg.optional_float("attack.pgd.step")
    return PgdConfig(eps, step, cfg.int("attack.pgd.steps"), cfg.str("attack.pgd.loss"),
                     cfg.int("attack.pgd.random_starts"), cfg.int("seed"))


def _manifold(cfg: Config, eps_max: float) -> ManifoldAttackConfig:
    return ManifoldAttackConfig(
        eps=eps_max, lambda_init=cfg.float("attack.manifold.lambda_init"),
        search_rounds=cfg.int("attack.manifold.rounds"), lr=cfg.float("attack.manifold.lr"),
        max_iterations=cfg.int("attack.manifold.max_iterations"), init=cfg.str("attack.manifold.init"),
        loss_kind=cfg.str("attack.manifold.loss"), optimizer=cfg.str("attack.manifold.optimizer"),
        patience=cfg.int("attack.manifold.patience"), seed=cfg.int("seed"))


# ---------------------------------------------------------------------------
# pipeline

def compute(cfg: Config) -> RunReport:
    eps_list = cfg.floats("bounds.eps")
    if not eps_list:
        raise ConfigError("eps list must be non-empty", cfg.lines.get("bounds.eps"), "bounds.eps")
    if any(e <= 0 for e in eps_list):
        raise ConfigError("eps values must be positive", cfg.lines.get("bounds.eps"), "bounds.eps")
    model = _model(cfg)
    lip, source = _lipschitz(cfg, model)
    K = lip.values.shape[0]
    if model is not None and model.num_classes != K:
        raise ConfigError(f"{K} Lipschitz constants for a {model.num_classes}-class model", None, "lipschitz.values")
    priors = _priors(cfg, model, K)
    delta = cfg.optional_float("bounds.delta")
    delta = cfg.float("lipschitz.delta") if delta is None else delta
    variant = cfg.str("bounds.variant")
    radius = cfg.float("lipschitz.r")

    warnings = []
    for eps in eps_list:
        bad = [i for i, L in enumerate(lip.values) if radius * L < eps]
        if bad:
            warnings.append(f"eps={eps!r}: r * L_i < eps for classes {bad}; the bound's Lipschitz hypothesis "
                            f"does not hold at r={radius!r}")

    amin, amax = cfg.optional_float("bounds.alpha_min"), cfg.optional_float("bounds.alpha_max")
    if (amin is None) != (amax is None):
        raise ConfigError("set both bounds.alpha_min and bounds.alpha_max", None, "bounds.alpha_min")
    if amin is None:
        alpha = cfg.optional_float("bounds.alpha")
        if alpha is None:
            raise ConfigError("need bounds.alpha or an alpha sweep", None, "bounds.alpha")
        amin = amax = alpha
    bounds = []
    for eps in eps_list:
        try:
            bounds += bound_curve(amin, amax, cfg.int("bounds.steps"), eps=eps, l_max=lip.l_max, priors=priors,
                                  delta=delta, variant=variant)
        except ValueError as exc:
            raise ConfigError(str(exc), cfg.lines.get("bounds.alpha"), "bounds.alpha") from exc

    rep = RunReport(cfg, lip, source, bounds, [], warnings, priors, delta)
    cids = cfg.classifier_ids()
    if cids:
        if model is None:
            raise ConfigError("classifiers need a model to evaluate on", None, "model")
        clfs = {cid: build_classifier(cfg, cid, model) for cid in cids}
        data = draw(model, cfg.int("eval.n"), RngStream(cfg.int("seed"), EVAL_STREAM))
        rep.classifiers = evaluate(cfg, model, clfs, eps_list, data)
        rep.eval_labels = data.labels
    return rep


def evaluate(cfg: Config, model: ConditionalModel, clfs: dict, eps_list, data) -> list[ClassifierResult]:
    n = len(data)
    out = {cid: ClassifierResult(cid, estimate_risk(f, model, n, None, data)) for cid, f in clfs.items()}
    in_dist = cfg.bool("eval.in_distribution")
    man_cfg = _manifold(cfg, max(eps_list)) if in_dist else None

    cells = []
    for cid in clfs:
        cells += [("adv", cid, eps) for eps in eps_list]
        if in_dist:
            cells.append(("in_adv", cid, None))

    def run_cell(cell):
        what, cid, eps = cell
        f = clfs[cid]
        if what == "adv":
            return estimate_adv_risk(f, model, eps, _pgd(cfg, eps), n, None, data)
        return in_adv_risk_curve(f, model, eps_list, man_cfg, n, None, data)

    with ThreadPoolExecutor(max_workers=worker_count(len(cells))) as pool:
        done = list(pool.map(run_cell, cells))
    for (what, cid, eps), est in zip(cells, done):
        if what == "adv":
            out[cid].adv[eps] = est
        else:
            out[cid].in_adv = dict(zip(eps_list, est))
    return [out[cid] for cid in clfs]


# ---------------------------------------------------------------------------
# files

def robustness_rows(rep: RunReport) -> list[dict]:
    seed = rep.config.int("seed")
    model_id = rep.config.str("model_id") or rep.config.str("model")
    rows = []
    for res in rep.classifiers:
        rows.append(report_row("risk", res.risk, None, res.cid, model_id, seed))
        for c, v in enumerate(res.risk.per_class):
            cnt = int(np.count_nonzero(rep.eval_labels == c))
            rows.append(report_row(f"risk[class={c}]", RiskEstimate(float(v), cnt, "risk"), None, res.cid, model_id, seed))
        for eps, est in res.adv.items():
            rows.append(report_row("adv_risk", est, eps, res.cid, model_id, seed))
        for eps, est in res.in_adv.items():
            rows.append(report_row("in_adv_risk", est, eps, res.cid, model_id, seed))
    return rows


def _pct(v: float) -> str:
    return f"{100 * v:6.2f}%"


def render_report(rep: RunReport) -> str:
    cfg = rep.config
    eps_list = cfg.floats("bounds.eps")
    L = rep.lipschitz.values
    lines = ["isorobust run report", "=" * 20, ""]
    lines.append(f"model: {cfg.str('model_id') or cfg.str('model') or '(none)'}")
    lines.append(f"seed: {cfg.int('seed')}")
    lines.append("")
    lines.append(f"Local Lipschitz constants ({rep.lipschitz_source}, r={cfg.float('lipschitz.r')!r}):")
    lines += [f"  class {i}: {v:.6g}" for i, v in enumerate(L)]
    lines.append(f"  L_max = {rep.lipschitz.l_max:.6g}")
    lines.append("")
    for w in rep.warnings:
        lines.append(f"WARNING: {w}")
    if rep.warnings:
        lines.append("")

    lines.append(f"Intrinsic robustness upper bound (variant {cfg.str('bounds.variant')}):")
    lines.append(f"  {'alpha':>10} {'eps':>8} {'bound':>10}")
    for b in rep.bounds:
        lines.append(f"  {b['alpha']:>10.6g} {b['eps']:>8.4g} {b['bound_raw']:>10.5f}")
    lines.append("")

    if rep.classifiers:
        header = f"  {'classifier':<16} {'natural':>8}"
        for eps in eps_list:
            header += f" {'rob@' + format(eps, 'g'):>9} {'in-rob@' + format(eps, 'g'):>10}"
        lines.append("Measured robustness (robust accuracy = 1 - attack success rate; attacks give upper estimates):")
        lines.append(header)
        for res in rep.classifiers:
            row = f"  {res.cid:<16} {_pct(1 - res.risk.value):>8}"
            for eps in eps_list:
                adv = res.adv.get(eps)
                ina = res.in_adv.get(eps)
                row += f" {_pct(1 - adv.value) if adv else '-':>9} {_pct(1 - ina.value) if ina else '-':>10}"
            lines.append(row)
        bound_row = f"  {'bound':<16} {'':>8}"
        for eps in eps_list:
            vals = [b["bound_raw"] for b in rep.bounds if b["eps"] == eps]
            bound_row += f" {_pct(vals[0]) if len(vals) == 1 else 'sweep':>9} {'':>10}"
        lines.append(bound_row)
        lines.append("")

        lines.append("Per-classifier bound checks:")
        p = rep.priors
        for res in rep.classifiers:
            per = res.risk.per_class
            alpha_cls = float(np.nanmin(per))
            lines.append(f"  {res.cid}: per-class risk {', '.join(f'{v:.4f}' for v in per)}; alpha = {alpha_cls:.4f}")
            for eps in eps_list:
                parts = [f"eps={eps:g}"]
                if alpha_cls > 0:
                    ub = theorem2_bound(BoundParams(eps, alpha_cls, rep.lipschitz.l_max, p,
                                                    rep.delta, "tilde")).raw
                    parts.append(f"robustness bound at measured alpha {ub:.5f}")
                lb = theorem1_lower_bound(per, L, eps, rep.delta, p).raw
                parts.append(f"adversarial-risk lower bound {lb:.5f}")
                if eps in res.in_adv:
                    parts.append(f"in-dist adv risk {res.in_adv[eps].value:.5f} (se {res.in_adv[eps].stderr:.5f})")
                if eps in res.adv:
                    parts.append(f"adv risk {res.adv[eps].value:.5f}")
                lines.append("    " + "; ".join(parts))
        lines.append("")

    lines.append("Files:")
    lines += [f"  {name}" for name in rep.manifest]
    lines.append("")
    lines.append("Re-run this exact configuration with: isorobust run report.txt")
    lines.append(cfg.snapshot().rstrip("\n"))
    return "\n".join(lines) + "\n"


def gnuplot_script(rep: RunReport) -> str:
    eps_list = rep.config.floats("bounds.eps")
    col = {c: i + 1 for i, c in enumerate(BOUND_COLUMNS)}
    plots = [f"'bounds.csv' every ::{i * rep.config.int('bounds.steps')}::{(i + 1) * rep.config.int('bounds.steps') - 1}"
             f" using {col['alpha']}:{col['bound_raw']} with lines title 'eps={e:g}'"
             for i, e in enumerate(eps_list)]
    return "\n".join([
        "# plot the bound curve: gnuplot -p bounds.gp",
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set xlabel 'alpha'",
        "set ylabel 'intrinsic robustness bound'",
        "plot " + ", \\\n     ".join(plots),
    ]) + "\n"


def output_dir(cfg: Config) -> Path:
    return Path(cfg.str("output"))


def run(cfg: Config) -> RunReport:
    """Compute everything first, then write files; on any failure remove what was written."""
    out = output_dir(cfg)
    rep = compute(cfg)
    created_dir = not out.exists()
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        names = ["lipschitz.csv", "bounds.csv", "robustness.csv"]
        if cfg.int("bounds.steps") > 1:
            names.append("bounds.gp")
        names.append("report.txt")
        rep.manifest = names
        path = out / "lipschitz.csv"
        written.append(path)
        write_lipschitz_csv(rep.lipschitz, path, rep.lipschitz_source)
        path = out / "bounds.csv"
        written.append(path)
        write_csv(path, "bounds", BOUND_COLUMNS, rep.bounds)
        path = out / "robustness.csv"
        written.append(path)
        write_csv(path, "robustness", ROBUSTNESS_COLUMNS, robustness_rows(rep))
        if "bounds.gp" in names:
            path = out / "bounds.gp"
            written.append(path)
            path.write_text(gnuplot_script(rep))
        path = out / "report.txt"
        written.append(path)
        path.write_text(render_report(rep))
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir and out.exists() and not any(out.iterdir()):
            out.rmdir()
        raise
    return rep
