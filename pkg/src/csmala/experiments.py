"""Experiment harness: pre-training, chain fleets, persisted traces and plot-ready exports.

Every chain writes its raw artifacts (step trace, validation-risk trace,
retained draws, metadata) under ``<out>/chains``. All exports are computed by
:func:`build_report` from those files alone, so deleting the exports and
re-running the report reproduces them byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .mlp import MLP, Architecture, load_params, save_params
from .posterior import SampleSet, coverage, credible_radius, posterior_mean_predict, validation_risk
from .sampler import ALGORITHMS, ChainConfig, run_chain, preset_config
from .toy1d import sweep
from .training import pretrain

__all__ = [
    "ChainJob",
    "ExperimentPlan",
    "VALIDATION_SEED_OFFSET",
    "build_report",
    "moving_average",
    "resolve_threads",
    "run_chain_job",
    "run_experiment",
    "run_scaling",
    "run_toy_kl",
]

log = logging.getLogger(__name__)

VALIDATION_SEED_OFFSET = 1_000_000
MA_WINDOW = 1501
HIST_BINS = 40


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit value, else ``CSMALA_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get("CSMALA_THREADS", "").strip()
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


def _rho_tag(rho: float) -> str:
    return f"{rho:g}"


def _atomic_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def moving_average(values, window: int = MA_WINDOW) -> np.ndarray:
    """Centered simple moving average, with the window truncated at both ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    half = window // 2
    kernel = np.ones(window)
    centered = slice(half, half + x.size)
    sums = np.convolve(x, kernel, mode="full")[centered]
    counts = np.convolve(np.ones(x.size), kernel, mode="full")[centered]
    return sums / counts


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid of ``(algorithm, rho)`` cells, each run with ``n_chains`` seeds.

    Chain ``i`` of every cell uses seed ``seed + i`` for its data, its
    pre-training and its sampler streams, so algorithms sharing a seed start
    from the same pre-trained parameters.
    """

    algos: tuple[str, ...] = ALGORITHMS
    rhos: tuple[float, ...] = (0.1, 0.3, 0.5)
    n_chains: int = 10
    seed: int = 0
    desk_scale: bool = True
    n: int | None = None
    n_val: int | None = None
    width: int | None = None
    depth: int = 2
    noise_sd: float = 0.02
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_optimizer: str = "adam"
    overrides: dict = field(default_factory=dict)
    alpha: float = 0.005
    monitor_every: int = 1

    def __post_init__(self):
        bad = [a for a in self.algos if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}")
        if not self.rhos or any(not 0.0 < r <= 1.0 for r in self.rhos):
            raise ValueError("every rho must lie in (0, 1]")
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be positive")

    @property
    def train_size(self) -> int:
        return self.n if self.n is not None else (2000 if self.desk_scale else 10_000)

    @property
    def val_size(self) -> int:
        return self.n_val if self.n_val is not None else self.train_size

    @property
    def arch(self) -> Architecture:
        r = self.width if self.width is not None else (32 if self.desk_scale else 100)
        return Architecture(1, self.depth, r)

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_chains)]

    def chain_config(self, algo: str, rho: float, seed: int) -> ChainConfig:
        return preset_config(
            algo, self.train_size, rho, self.arch.P, desk_scale=self.desk_scale, seed=seed, **self.overrides
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algos"] = list(self.algos)
        d["rhos"] = list(self.rhos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        d["algos"] = tuple(d["algos"])
        d["rhos"] = tuple(float(r) for r in d["rhos"])
        return cls(**d)


@dataclass(frozen=True)
class ChainJob:
    plan: ExperimentPlan
    algo: str
    rho: float
    seed: int
    out_dir: str

    @property
    def name(self) -> str:
        return f"{self.algo}_{_rho_tag(self.rho)}_seed{self.seed}"

    @property
    def cell(self) -> tuple[str, float]:
        return (self.algo, self.rho)


def _data_paths(out: Path, n: int, seed: int) -> tuple[Path, Path]:
    base = out / "data"
    return base / f"train_n{n}_seed{seed}.csv", base / f"val_n{n}_seed{seed}.csv"


def ensure_datasets(plan: ExperimentPlan, seed: int, out: Path):
    """Generate (or reload) the training and validation sets of one seed."""
    train_path, val_path = _data_paths(out, plan.train_size, seed)
    if train_path.exists() and val_path.exists():
        return datamod.load(train_path), datamod.load(val_path)
    train = datamod.generate(plan.train_size, plan.noise_sd, seed)
    val = datamod.generate(plan.val_size, plan.noise_sd, seed + VALIDATION_SEED_OFFSET)
    datamod.save(train, train_path)
    datamod.save(val, val_path)
    return train, val


def ensure_pretrained(plan: ExperimentPlan, seed: int, rho: float, train, out: Path) -> np.ndarray:
    """Pre-trained start point shared by all algorithms of a ``(seed, rho)`` pair."""
    arch = plan.arch
    tag = f"{plan.pretrain_optimizer}{plan.pretrain_steps}_lr{plan.pretrain_lr:g}"
    path = out / "pretrain" / f"n{plan.train_size}_rho{_rho_tag(rho)}_seed{seed}_{tag}.bin"
    if path.exists():
        stored_arch, theta = load_params(path)
        if stored_arch == arch:
            return theta[0]
    model = MLP(arch)
    theta0 = model.init_params(np.random.default_rng([seed, 1]))
    theta = pretrain(
        model,
        train,
        theta0,
        steps=plan.pretrain_steps,
        lr=plan.pretrain_lr,
        optimizer=plan.pretrain_optimizer,
        rho=rho,
        seed=seed,
    )
    save_params(path, arch, theta)
    return theta


def _chain_dir(out: Path, name: str) -> Path:
    return out / "chains" / name


def run_chain_job(job: ChainJob) -> dict:
    """Run one chain and persist its artifacts; reuse them if already complete."""
    out = Path(job.out_dir)
    plan = job.plan
    cfg = plan.chain_config(job.algo, job.rho, job.seed)
    cdir = _chain_dir(out, job.name)
    meta_path = cdir / "chain.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("fingerprint") == cfg.fingerprint() and meta.get("arch") == plan.arch.to_dict():
            return meta

    train, val = ensure_datasets(plan, job.seed, out)
    theta0 = ensure_pretrained(plan, job.seed, job.rho, train, out)
    model = MLP(plan.arch)
    Xv, yv = val.xs, val.ys

    def monitor(theta):
        return validation_risk(model.predict(theta, Xv), yv)

    result = run_chain(model, cfg, train, theta0, monitor=monitor, monitor_every=plan.monitor_every)
    if not np.all(np.isfinite(result.draws)):
        raise FloatingPointError("non-finite retained draw")

    result.write_trace(cdir / "trace.csv")
    _atomic_text(
        cdir / "val_risk.csv",
        _csv_text(("step", "val_risk"), zip(result.monitor_steps.tolist(), result.monitor_values)),
    )
    save_params(cdir / "draws.bin", plan.arch, result.draws)
    meta = {
        "name": job.name,
        "algo": job.algo,
        "rho": job.rho,
        "seed": job.seed,
        "config": cfg.to_dict(),
        "fingerprint": cfg.fingerprint(),
        "arch": plan.arch.to_dict(),
        "train": str(_data_paths(out, plan.train_size, job.seed)[0].relative_to(out)),
        "val": str(_data_paths(out, plan.train_size, job.seed)[1].relative_to(out)),
        "acceptance_rate": result.acceptance_rate,
        "final_zeta": float(result.zeta[-1]),
    }
    _atomic_text(meta_path, _json_text(meta))
    return meta


def _safe_job(job: ChainJob):
    # imported BLAS pools would otherwise oversubscribe a small machine
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            return job, run_chain_job(job), None
    except Exception as exc:  # quarantine, never abort the fleet
        return job, None, "".join(traceback.format_exception_only(type(exc), exc)).strip()


def _stage_inputs(jobs: list[ChainJob]) -> dict[tuple, str]:
    """Create the datasets and start points shared between jobs, once each.

    Returns the error message per ``(plan, seed, rho)`` whose preparation failed.
    """
    errors = {}
    for job in jobs:
        key = (job.plan.train_size, job.seed, job.rho)
        if key in errors:
            continue
        out = Path(job.out_dir)
        try:
            train, _ = ensure_datasets(job.plan, job.seed, out)
            ensure_pretrained(job.plan, job.seed, job.rho, train, out)
            errors[key] = None
        except Exception as exc:
            errors[key] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return errors


def run_jobs(jobs: list[ChainJob], threads: int = 1) -> tuple[list[dict], list[dict]]:
    """Execute jobs on a bounded pool; returns ``(metas, failures)``."""
    if threads <= 1 or len(jobs) <= 1:
        outcomes = [_safe_job(j) for j in jobs]
    else:
        # shared inputs are built serially so workers never write the same file
        staged = _stage_inputs(jobs)
        ready = [j for j in jobs if staged[(j.plan.train_size, j.seed, j.rho)] is None]
        outcomes = [(j, None, staged[(j.plan.train_size, j.seed, j.rho)]) for j in jobs if j not in ready]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes += list(pool.map(_safe_job, ready))
    metas, failures = [], []
    for job, meta, err in outcomes:
        if err is None:
            metas.append(meta)
        else:
            log.warning("chain %s quarantined: %s", job.name, err)
            failures.append({"chain": job.name, "algo": job.algo, "rho": job.rho, "seed": job.seed, "error": err})
    return metas, failures


def plan_jobs(plan: ExperimentPlan, out_dir) -> list[ChainJob]:
    return [
        ChainJob(plan, algo, float(rho), seed, str(out_dir))
        for rho in plan.rhos
        for algo in plan.algos
        for seed in plan.seeds()
    ]


def run_experiment(plan: ExperimentPlan, out_dir, threads: int | None = None) -> dict:
    """Run every chain of the plan, then build all exports from the persisted traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "plan.json", _json_text(plan.to_dict()))
    _, failures = run_jobs(plan_jobs(plan, out), resolve_threads(threads))
    _atomic_text(out / "failures.json", _json_text(failures))
    return build_report(out)


def _read_trace(path: Path) -> dict[str, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {
        "accepted": arr[:, 1].astype(bool),
        "mask_count": arr[:, 3].astype(np.int64),
    }


def _load_chain(out: Path, meta: dict) -> dict:
    """Recompute one chain's summary numbers from its persisted files."""
    cdir = _chain_dir(out, meta["name"])
    trace = _read_trace(cdir / "trace.csv")
    vr = np.loadtxt(cdir / "val_risk.csv", delimiter=",", skiprows=1, ndmin=2)
    arch, draws = load_params(cdir / "draws.bin")
    val = datamod.load(out / meta["val"])
    model = MLP(arch)
    samples = SampleSet(draws, model, meta["fingerprint"])
    mean_pred = posterior_mean_predict(samples, val.xs)
    report = credible_radius(samples, val.xs, meta.get("alpha", 0.005))
    f_true = datamod.true_f(val.xs[:, 0])
    burn_in = meta["config"]["burn_in"]
    post = np.arange(len(trace["accepted"])) >= burn_in
    return {
        "meta": meta,
        "acceptance_rate": float(np.mean(trace["accepted"])),
        "accepted_sizes": trace["mask_count"][trace["accepted"] & post],
        "val_steps": vr[:, 0].astype(np.int64),
        "val_risk": vr[:, 1],
        "posterior_mean_risk": validation_risk(mean_pred, val.ys),
        "draw_risks": [validation_risk(p, val.ys) for p in samples.predictions(val.xs)],
        "mean_pred": mean_pred,
        "report": report,
        "truth_distance": float(np.mean((mean_pred - f_true) ** 2)),
        "f_true": f_true,
    }


def _histogram_rows(sizes: np.ndarray) -> list[tuple[int, int, int]]:
    if sizes.size == 0:
        return []
    lo, hi = int(sizes.min()), int(sizes.max()) + 1
    width = max(1, math.ceil((hi - lo) / HIST_BINS))
    edges = np.arange(lo, hi + width, width)
    counts, _ = np.histogram(sizes, bins=edges)
    return [(int(a), int(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def build_report(out_dir, alpha: float | None = None, window: int = MA_WINDOW) -> dict:
    """Compute all exports from ``<out>/chains``; pure function of the persisted traces."""
    out = Path(out_dir)
    plan = ExperimentPlan.from_dict(json.loads((out / "plan.json").read_text()))
    alpha = plan.alpha if alpha is None else alpha
    failures_path = out / "failures.json"
    failures = json.loads(failures_path.read_text()) if failures_path.exists() else []
    quarantined = {(f["algo"], float(f["rho"])) for f in failures}

    cells = {}
    for rho in plan.rhos:
        for algo in plan.algos:
            if (algo, rho) in quarantined:
                continue
            chains = []
            for seed in plan.seeds():
                meta_path = _chain_dir(out, f"{algo}_{_rho_tag(rho)}_seed{seed}") / "chain.json"
                if not meta_path.exists():
                    quarantined.add((algo, rho))
                    break
                meta = dict(json.loads(meta_path.read_text()), alpha=alpha)
                chains.append(_load_chain(out, meta))
            else:
                cells[(algo, rho)] = chains

    summary = {"cells": [], "quarantined": sorted([a, r] for a, r in quarantined)}
    for (algo, rho), chains in cells.items():
        tag = f"{algo}_{_rho_tag(rho)}"
        curves = np.stack([moving_average(c["val_risk"], window) for c in chains])
        steps = chains[0]["val_steps"]
        _atomic_text(
            out / f"risk_curve_{tag}.csv",
            _csv_text(
                ("step", "ma_risk_min", "ma_risk_mean", "ma_risk_max"),
                zip(steps.tolist(), curves.min(axis=0), curves.mean(axis=0), curves.max(axis=0)),
            ),
        )
        sizes = np.concatenate([c["accepted_sizes"] for c in chains])
        _atomic_text(out / f"accepted_batch_hist_{tag}.csv", _csv_text(("bin_lo", "bin_hi", "count"), _histogram_rows(sizes)))
        radii = np.array([c["report"].radius for c in chains])
        # every seed has its own validation inputs, so each chain is scored against its own truth
        cov = float(np.mean([coverage([(c["mean_pred"], c["report"])], c["f_true"]) for c in chains]))
        n_acc = sizes.size
        summary["cells"].append(
            {
                "algo": algo,
                "rho": rho,
                "n_chains": len(chains),
                "acceptance_rate": float(np.mean([c["acceptance_rate"] for c in chains])),
                "posterior_mean_risk": [c["posterior_mean_risk"] for c in chains],
                "mean_draw_risk": [float(np.mean(c["draw_risks"])) for c in chains],
                "accepted_batch_mean": float(sizes.mean()) if n_acc else float("nan"),
                "accepted_batch_se": float(sizes.std(ddof=1) / math.sqrt(n_acc)) if n_acc > 1 else float("nan"),
                "accepted_batch_target": plan.train_size * rho,
                "radius": radii.tolist(),
                "radius_mean": float(radii.mean()),
                "radius_sd": float(radii.std(ddof=1)) if radii.size > 1 else 0.0,
                "truth_distance": [c["truth_distance"] for c in chains],
                "coverage": cov,
            }
        )

    by_cell = {(c["algo"], c["rho"]): c for c in summary["cells"]}
    header = ["rho"]
    for algo in plan.algos:
        header += [f"{algo}_radius_mean", f"{algo}_radius_sd", f"{algo}_coverage"]
    rows = []
    for rho in plan.rhos:
        row = [rho]
        for algo in plan.algos:
            c = by_cell.get((algo, rho))
            row += [c["radius_mean"], c["radius_sd"], c["coverage"]] if c else ["", "", ""]
        rows.append(row)
    _atomic_text(out / "radii.csv", _csv_text(header, rows))
    _atomic_text(out / "summary.json", _json_text(summary))
    return summary


def run_scaling(
    plan: ExperimentPlan,
    n_list,
    fixed_batch: float,
    out_dir,
    threads: int | None = None,
) -> list[dict]:
    """Posterior-mean risk as ``n`` grows with the mean batch size ``n rho`` held fixed.

    The plan's ``n`` and ``rhos`` are replaced per point; its overrides (for
    example a common burn-in) apply to every point.
    """
    out = Path(out_dir)
    n_list = [int(n) for n in n_list]
    for n in n_list:
        if fixed_batch > n:
            raise ValueError(f"fixed batch {fixed_batch} exceeds n={n} (rho > 1)")
    jobs = []
    for n in n_list:
        sub = replace(plan, n=n, n_val=plan.n_val, rhos=(fixed_batch / n,))
        jobs += plan_jobs(sub, out)
    _, failures = run_jobs(jobs, resolve_threads(threads))
    _atomic_text(out / "scaling_failures.json", _json_text(failures))
    failed = {(f["algo"], float(f["rho"])) for f in failures}

    points = []
    for n in n_list:
        rho = fixed_batch / n
        for algo in plan.algos:
            if (algo, rho) in failed:
                continue
            risks = []
            for seed in plan.seeds():
                meta_path = _chain_dir(out, f"{algo}_{_rho_tag(rho)}_seed{seed}") / "chain.json"
                meta = dict(json.loads(meta_path.read_text()), alpha=plan.alpha)
                risks.append(_load_chain(out, meta)["posterior_mean_risk"])
            risks = np.array(risks)
            points.append(
                {
                    "n": n,
                    "rho": rho,
                    "algo": algo,
                    "risk_mean": float(risks.mean()),
                    "risk_sd": float(risks.std(ddof=1)) if risks.size > 1 else 0.0,
                    "risks": risks.tolist(),
                }
            )
    _atomic_text(
        out / "scaling.csv",
        _csv_text(
            ("n", "rho", "algo", "risk_mean", "risk_sd"),
            [(p["n"], p["rho"], p["algo"], p["risk_mean"], p["risk_sd"]) for p in points],
        ),
    )
    return points


def run_toy_kl(out_dir, n: int = 10, seeds=range(20), lam_factors=(0.25, 0.5, 1.0), rhos=(0.1, 0.5, 0.9)) -> tuple[list[dict], int]:
    """Write ``toy_kl.json`` and return ``(rows, number of violated cells)``."""
    rows = sweep(n=n, lam_factors=lam_factors, rhos=rhos, seeds=seeds)
    violations = sum(not r["ok"] for r in rows)
    # inf bounds (rho = 1) are not valid JSON numbers
    clean = [{k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in r.items()} for r in rows]
    _atomic_text(Path(out_dir) / "toy_kl.json", _json_text(clean))
    return rows, violations
