"""Command-line entry point: ``csmala <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .experiments import (
    VALIDATION_SEED_OFFSET,
    ExperimentPlan,
    build_report,
    plan_jobs,
    resolve_threads,
    run_jobs,
    run_scaling,
    run_toy_kl,
)
from .mlp import MLP, Architecture, save_params
from .sampler import ALGORITHMS
from .training import pretrain

def _csv_list(kind):
    def parse(text):
        try:
            return tuple(kind(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _algos(text):
    algos = _csv_list(str)(text)
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown algorithm(s) {', '.join(bad)}; choose from {', '.join(ALGORITHMS)}")
    return algos


def _add_chain_overrides(p):
    g = p.add_argument_group("chain overrides (default: preset for the chosen scale)")
    g.add_argument("--burn-in", type=int)
    g.add_argument("--gap", type=int)
    g.add_argument("--draws", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--step-size", dest="s", type=float)
    g.add_argument("--lam", type=float)


def _overrides(args) -> dict:
    keys = ("burn_in", "gap", "draws", "gamma", "s", "lam")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _add_plan_args(p):
    p.add_argument("--chains", type=int, default=10, help="chains per cell (default 10)")
    p.add_argument("--n", type=int, help="training size (default 2000 desk, 10000 full)")
    p.add_argument("--width", type=int, help="hidden width (default 32 desk, 100 full)")
    p.add_argument("--pretrain-steps", type=int, default=2000)
    p.add_argument("--pretrain-optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--alpha", type=float, default=0.005)
    _add_chain_overrides(p)


def _plan_from_args(args, algos, rhos) -> ExperimentPlan:
    return ExperimentPlan(
        algos=algos,
        rhos=rhos,
        n_chains=args.chains,
        seed=args.seed,
        desk_scale=args.desk_scale,
        n=args.n,
        width=args.width,
        pretrain_steps=args.pretrain_steps,
        pretrain_optimizer=args.pretrain_optimizer,
        overrides=_overrides(args),
        alpha=args.alpha,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csmala",
        description="Corrected stochastic MALA for Gibbs posteriors over ReLU networks.",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", type=Path, default=Path("runs"))
    scale = parser.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=True,
                       help="n=2000, width 32, burn-in and gap divided by 10 (default)")
    scale.add_argument("--full-scale", dest="desk_scale", action="store_false",
                       help="preset sizes without rescaling (hours per cell)")
    parser.add_argument("--threads", type=int, help="worker processes (env CSMALA_THREADS, default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a training set and its validation twin")
    p.add_argument("--n", type=int, help="sample size (default 2000 desk, 10000 full)")
    p.add_argument("--noise-sd", type=float, default=0.02)

    p = sub.add_parser("pretrain", help="optimise the empirical risk to obtain a chain start point")
    p.add_argument("--data", type=Path, help="training CSV (default: generate from --seed)")
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--rho", type=float, default=1.0, help="Bernoulli batch probability")
    p.add_argument("--output", type=Path, help="parameter file (default <out-dir>/pretrained.bin)")

    p = sub.add_parser("sample", help="run chain fleets and persist their traces")
    p.add_argument("--algos", type=_algos, default=ALGORITHMS)
    p.add_argument("--rhos", type=_csv_list(float), default=(0.1, 0.3, 0.5))
    p.add_argument("--force", action="store_true", help="recompute chains that already exist")
    _add_plan_args(p)

    p = sub.add_parser("report", help="rebuild all exports from persisted traces")
    p.add_argument("--window", type=int, default=1501, help="moving-average window (odd)")

    p = sub.add_parser("scaling", help="posterior-mean risk against n at fixed mean batch size")
    p.add_argument("--n-list", type=_csv_list(int), default=(2000, 4000, 8000))
    p.add_argument("--batch", type=float, default=400.0, help="fixed mean batch size n*rho")
    p.add_argument("--algos", type=_algos, default=ALGORITHMS)
    _add_plan_args(p)
    p.set_defaults(chains=5)

    p = sub.add_parser("toy-kl", help="check the KL bounds on the one-parameter model")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--lam-factors", type=_csv_list(float), default=(0.25, 0.5, 1.0))
    p.add_argument("--rhos", type=_csv_list(float), default=(0.1, 0.5, 0.9))
    return parser


def _cmd_generate(args) -> int:
    n = args.n or (2000 if args.desk_scale else 10_000)
    train = datamod.generate(n, args.noise_sd, args.seed)
    val = datamod.generate(n, args.noise_sd, args.seed + VALIDATION_SEED_OFFSET)
    datamod.save(train, args.out_dir / "train.csv")
    datamod.save(val, args.out_dir / "val.csv")
    print(f"wrote {args.out_dir / 'train.csv'} and {args.out_dir / 'val.csv'} (n={n})")
    return 0


def _cmd_pretrain(args) -> int:
    if args.data is not None:
        train = datamod.load(args.data)
    else:
        train = datamod.generate(2000 if args.desk_scale else 10_000, seed=args.seed)
    width = args.width or (32 if args.desk_scale else 100)
    arch = Architecture(train.xs.shape[1], args.depth, width)
    model = MLP(arch)
    theta0 = model.init_params(np.random.default_rng([args.seed, 1]))
    theta = pretrain(model, train, theta0, steps=args.steps, lr=args.lr, optimizer=args.optimizer,
                     rho=args.rho, seed=args.seed)
    out = args.output or args.out_dir / "pretrained.bin"
    save_params(out, arch, theta)
    risk = float(np.mean(model.losses(theta, train.xs, train.ys)))
    print(f"wrote {out} (P={arch.P}, training risk {risk:.6g})")
    return 0


def _merge_plan(out: Path, plan: ExperimentPlan) -> ExperimentPlan:
    """Union algorithms and rhos with an existing compatible plan in ``out``."""
    path = out / "plan.json"
    if not path.exists():
        return plan
    old = ExperimentPlan.from_dict(json.loads(path.read_text()))
    if replace(old, algos=plan.algos, rhos=plan.rhos) != plan:
        raise SystemExit(f"{path} holds an incompatible plan; use a fresh --out-dir")
    algos = tuple(a for a in ALGORITHMS if a in old.algos or a in plan.algos)
    rhos = tuple(sorted(set(old.rhos) | set(plan.rhos)))
    return replace(plan, algos=algos, rhos=rhos)


def _cmd_sample(args) -> int:
    out = args.out_dir
    plan = _plan_from_args(args, args.algos, args.rhos)
    jobs = plan_jobs(plan, out)
    if args.force:
        for job in jobs:
            shutil.rmtree(out / "chains" / job.name, ignore_errors=True)
    merged = _merge_plan(out, plan)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(merged.to_dict(), indent=2, sort_keys=True) + "\n")
    metas, failures = run_jobs(jobs, resolve_threads(args.threads))
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    for m in metas:
        print(f"{m['name']}: acceptance {m['acceptance_rate']:.3f}")
    for f in failures:
        print(f"{f['chain']}: QUARANTINED ({f['error']})", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    if not (args.out_dir / "plan.json").exists():
        print(f"csmala: no plan.json in {args.out_dir}; run `sample` first", file=sys.stderr)
        return 2
    summary = build_report(args.out_dir, window=args.window)
    for c in summary["cells"]:
        pm = np.mean(c["posterior_mean_risk"])
        print(
            f"{c['algo']:>6} rho={c['rho']:<5g} acc={c['acceptance_rate']:.3f} "
            f"post-mean risk={pm:.3e} radius={c['radius_mean']:.3e}+-{c['radius_sd']:.1e} "
            f"coverage={c['coverage']:.0%}"
        )
    for algo, rho in summary["quarantined"]:
        print(f"{algo:>6} rho={rho:<5g} quarantined")
    return 0


def _cmd_scaling(args) -> int:
    plan = _plan_from_args(args, args.algos, (1.0,))
    points = run_scaling(plan, args.n_list, args.batch, args.out_dir, resolve_threads(args.threads))
    for p in points:
        print(f"n={p['n']:<6} rho={p['rho']:<8.4g} {p['algo']:>6} risk={p['risk_mean']:.4e} +- {p['risk_sd']:.1e}")
    return 0


def _cmd_toy_kl(args) -> int:
    rows, violations = run_toy_kl(
        args.out_dir, n=args.n, seeds=range(args.seeds), lam_factors=args.lam_factors, rhos=args.rhos
    )
    print(f"{len(rows)} cells, {violations} violation(s); wrote {args.out_dir / 'toy_kl.json'}")
    return 1 if violations else 0


COMMANDS = {
    "generate": _cmd_generate,
    "pretrain": _cmd_pretrain,
    "sample": _cmd_sample,
    "report": _cmd_report,
    "scaling": _cmd_scaling,
    "toy-kl": _cmd_toy_kl,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolve_threads(args.threads)
    except ValueError as exc:
        print(f"csmala: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
