"""Command-line entry point: ``isorobust <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .attacks import ManifoldAttackConfig, PgdConfig, manifold_attack_batch, pgd_l2_batch, write_trace_csv
from .bounds import BOUND_COLUMNS, bound_curve, uniform_priors
from .classify import (Architecture, Classifier, ConstantClassifier, HalfspaceClassifier, TrainConfig,
                       load_classifier, save_classifier, train)
from .config import ConfigError, load_config
from .container import ModelFormatError
from .experiment import EVAL_STREAM, output_dir, run
from .gaussian import RngStream
from .genmodel import ConditionalModel, load_model_or_spec, parse_model_spec, save_model
from .lipschitz import LipschitzConfig, LipschitzEstimate, estimate_all_classes, estimate_repeated, write_lipschitz_csv
from .reporting import write_csv
from .risk import (ROBUSTNESS_COLUMNS, draw, estimate_adv_risk, estimate_risk, in_adv_risk_curve, report_row)
from .verify import run_suite

log = logging.getLogger("isorobust")


def _priors_arg(text: str, k: int | None = None) -> tuple[float, ...]:
    """``uniform:K``, ``uniform`` (needs ``k``) or a comma list."""
    if text.startswith("uniform"):
        _, _, count = text.partition(":")
        n = int(count) if count else k
        if not n:
            raise ValueError("uniform priors need a class count, e.g. uniform:10")
        return uniform_priors(n)
    return tuple(float(t) for t in text.split(","))


def classifier_from_arg(text: str, model: ConditionalModel | None = None) -> Classifier:
    """A saved classifier file, ``halfspace(w=-1:0, b=0)`` or ``constant(label=0)``."""
    if Path(text).is_file() or text.endswith((".ircf", ".bin")) or "/" in text:
        return load_classifier(text)
    name, params = parse_model_spec(text)
    if name == "halfspace":
        w = params.get("w")
        w = (w,) if isinstance(w, (int, float)) else w
        return HalfspaceClassifier([float(v) for v in w], float(params.get("b", 0.0)))
    if name == "constant":
        if model is None:
            raise ValueError("constant classifier needs --model for its dimensions")
        return ConstantClassifier(int(params.get("label", 0)), int(params.get("classes", model.num_classes)),
                                  model.out_dim)
    return load_classifier(text)


def _manifold_cfg(args, eps: float) -> ManifoldAttackConfig:
    return ManifoldAttackConfig(eps=eps, lr=args.lr, max_iterations=args.max_iterations, init=args.init,
                                optimizer=args.optimizer, search_rounds=args.rounds, patience=args.patience,
                                seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    overrides = dict(kv.split("=", 1) for kv in args.set)
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    if args.output:
        overrides["output"] = args.output
    cfg = load_config(args.config, overrides)
    rep = run(cfg)
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = output_dir(cfg)
    for name in rep.manifest:
        print(out / name)
    return 0


def cmd_verify(args) -> int:
    checks = run_suite(args.suite, emit=lambda line: print(line, flush=True))
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_bound(args) -> int:
    start = time.perf_counter()
    priors = _priors_arg(args.priors)
    amax = args.alpha if args.alpha_max is None else args.alpha_max
    rows = []
    for eps in args.eps:
        rows += bound_curve(args.alpha, amax, args.steps, eps=eps, l_max=args.lmax, priors=priors,
                            delta=args.delta, variant=args.variant)
    write_csv(args.out, "bounds", BOUND_COLUMNS, rows)
    log.info("bound evaluation took %.3f s", time.perf_counter() - start)
    return 0


def cmd_lipschitz(args) -> int:
    m = load_model_or_spec(args.model)
    cfg = LipschitzConfig(args.S, args.N, args.r, args.delta, args.seed)
    if args.trials > 1:
        mean, std = estimate_repeated(m, cfg, args.trials)
        for i, (mu, sd) in enumerate(zip(mean, std)):
            print(f"class {i}: {mu:.4f} +- {sd:.4f}", file=sys.stderr)
        write_lipschitz_csv(LipschitzEstimate(mean, None), args.out, source=f"mean-of-{args.trials}")
    else:
        write_lipschitz_csv(estimate_all_classes(m, cfg), args.out)
    return 0


def cmd_train(args) -> int:
    m = load_model_or_spec(args.model)
    cfg = TrainConfig(args.lr, args.epochs, args.batch_size, args.train_size, args.method, args.eps_train,
                      args.pgd_step, args.pgd_steps, args.seed)
    history: list = []
    f = train(Architecture.parse(args.arch), m, cfg, history)
    save_classifier(f, args.out)
    if history:
        print(f"final training loss {history[-1]:.6f}", file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    m = load_model_or_spec(args.model)
    f = classifier_from_arg(args.classifier, m)
    data = draw(m, args.n, RngStream(args.seed, EVAL_STREAM))
    ids = np.arange(len(data))
    rows = []
    if args.kind == "pgd":
        res = pgd_l2_batch(f, data.x, data.labels, PgdConfig(args.eps, args.step, args.steps, args.loss,
                                                              seed=args.seed))
        for i in ids:
            rows.append({"sample_id": int(i), "attack": "pgd", "success": res.success[i],
                         "perturbation": res.perturbation[i], "iterations": res.iterations[i]})
    else:
        res = manifold_attack_batch(f, m, data.x, data.labels, data.z, _manifold_cfg(args, args.eps), ids)
        ok = res.success(args.eps)
        for i in ids:
            rows.append({"sample_id": int(i), "attack": "manifold", "success": ok[i],
                         "perturbation": res.best_perturbation[i], "iterations": res.iterations[i],
                         "lambda_final": float(res.lambda_final[i])})
    write_trace_csv(args.out, rows)
    rate = np.mean([r["success"] for r in rows]) if rows else 0.0
    print(f"{args.kind} success rate {rate:.4f} over {len(rows)} samples", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    m = load_model_or_spec(args.model)
    f = classifier_from_arg(args.classifier, m)
    data = draw(m, args.n, RngStream(args.seed, EVAL_STREAM))
    model_id = args.model_id or args.model
    cid = args.classifier_id or args.classifier
    rows = [report_row("risk", estimate_risk(f, m, args.n, None, data), None, cid, model_id, args.seed)]
    for eps in args.eps:
        pgd = PgdConfig(eps, args.step, args.steps, seed=args.seed)
        rows.append(report_row("adv_risk", estimate_adv_risk(f, m, eps, pgd, args.n, None, data), eps, cid,
                               model_id, args.seed))
    if not args.no_in_dist:
        ests = in_adv_risk_curve(f, m, args.eps, _manifold_cfg(args, max(args.eps)), args.n, None, data)
        for eps, est in zip(args.eps, ests):
            rows.append(report_row("in_adv_risk", est, eps, cid, model_id, args.seed))
    write_csv(args.out, "robustness", ROBUSTNESS_COLUMNS, rows)
    return 0


def cmd_save_model(args) -> int:
    save_model(load_model_or_spec(args.spec), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_manifold_flags(p):
    p.add_argument("--init", choices=("optimize", "recorded-z"), default="optimize",
                   help="latent start for the manifold search")
    p.add_argument("--optimizer", choices=("adam", "gd"), default="adam")
    p.add_argument("--lr", type=float, default=0.01, help="manifold search learning rate")
    p.add_argument("--rounds", type=int, default=5, help="lambda binary-search rounds")
    p.add_argument("--max-iterations", type=int, default=10000, help="iterations per lambda round")
    p.add_argument("--patience", type=int, default=200, help="stop a round after this many non-improving steps")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isorobust", description="Intrinsic robustness bounds and attacks "
                                 "for data from conditional generative models.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config and write CSVs plus report.txt")
    p.add_argument("config", help="config file, or a report.txt whose resolved config block is replayed")
    p.add_argument("--output", help="override the config's output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run a fixed-seed invariant suite")
    p.add_argument("suite", choices=("gaussian", "bounds", "lipschitz", "attacks", "all"))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bound", help="evaluate the intrinsic robustness bound directly")
    p.add_argument("--variant", choices=("alpha", "tilde"), default="tilde",
                   help="'alpha': overall risk >= alpha; 'tilde': every class risk >= alpha")
    p.add_argument("--alpha", type=float, required=True, help="risk level (start of the sweep with --alpha-max)")
    p.add_argument("--alpha-max", type=float, help="end of an alpha sweep")
    p.add_argument("--steps", type=int, default=1, help="number of alpha values in the sweep")
    p.add_argument("--eps", type=float, nargs="+", required=True, help="one or more l2 budgets")
    p.add_argument("--delta", type=float, default=0.0, help="failure probability of the Lipschitz estimate")
    p.add_argument("--lmax", type=float, required=True, help="largest per-class local Lipschitz constant")
    p.add_argument("--priors", default="uniform:10", help="'uniform:K' or comma-separated class priors")
    p.add_argument("--out", default="-", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("lipschitz", help="estimate per-class local Lipschitz constants")
    p.add_argument("--model", required=True, help="model file or synthetic spec, e.g. 'mlp-random(seed=1)'")
    p.add_argument("--S", type=int, default=1000, help="latent samples")
    p.add_argument("--N", type=int, default=2000, help="neighbours per sample")
    p.add_argument("--r", type=float, default=0.5, help="latent ball radius")
    p.add_argument("--delta", type=float, default=0.001, help="percentile level 1 - delta")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1, help="repeat with seeds seed..seed+trials-1 and average")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("train", help="train a classifier on samples from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--arch", default="linear", help="'linear' or 'mlp:16,16:relu'")
    p.add_argument("--method", choices=("erm", "adv-train"), default="erm")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64, help="0 for full batch")
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--eps-train", type=float, default=0.5, help="PGD budget for adv-train")
    p.add_argument("--pgd-step", type=float, default=0.1)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="classifier file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack samples and write a per-sample trace CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier", required=True, help="classifier file, 'halfspace(w=-1:0, b=0)' or 'constant(label=0)'")
    p.add_argument("--kind", choices=("pgd", "manifold"), default="pgd")
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, help="PGD step size (default from the eps table, else eps/10)")
    p.add_argument("--steps", type=int, default=100, help="PGD iterations")
    p.add_argument("--loss", choices=("cross-entropy", "cw-margin"), default="cross-entropy")
    _add_manifold_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="estimate risk, adversarial and in-distribution adversarial risk")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--eps", type=float, nargs="+", default=[1.0])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--no-in-dist", action="store_true", help="skip the manifold attack")
    p.add_argument("--model-id", default="")
    p.add_argument("--classifier-id", default="")
    _add_manifold_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("save-model", help="write a synthetic model spec to a model file")
    p.add_argument("spec")
    p.add_argument("out")
    p.set_defaults(func=cmd_save_model)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
