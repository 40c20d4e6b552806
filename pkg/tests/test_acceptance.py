"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <k> PASS|FAIL`` line with the measured
numbers. The desk-scale chain fleets are shared between criteria through
module-scoped fixtures; set ``CSMALA_ACCEPTANCE_DIR`` to a persistent
directory to reuse completed chains across sessions.
"""
import math
import os
from pathlib import Path

import numpy as np
import pytest

from csmala.cli import main as cli_main
from csmala.data import Dataset, generate
from csmala.experiments import ExperimentPlan, run_experiment, run_scaling
from csmala.mlp import MLP, Architecture, grad_loss, loss, param_count
from csmala.sampler import ChainConfig, run_chain
from csmala.toy1d import ConstantModel, bin_masses, make_grid, sweep, tilde_density, toy_data

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def record(k, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return record


@pytest.fixture(scope="module")
def fleet_dir(tmp_path_factory):
    root = os.environ.get("CSMALA_ACCEPTANCE_DIR")
    return Path(root) if root else tmp_path_factory.mktemp("acceptance")


# validation curves are not needed here, so they are sampled sparsely
FLEET = dict(monitor_every=10)


@pytest.fixture(scope="module")
def fleet_rho01(fleet_dir):
    plan = ExperimentPlan(rhos=(0.1,), n_chains=3, **FLEET)
    summary = run_experiment(plan, fleet_dir / "rho0.1")
    return {c["algo"]: c for c in summary["cells"]}, summary


@pytest.fixture(scope="module")
def fleet_rho05(fleet_dir):
    plan = ExperimentPlan(rhos=(0.5,), n_chains=10, **FLEET)
    summary = run_experiment(plan, fleet_dir / "rho0.5")
    return {c["algo"]: c for c in summary["cells"]}, summary


def test_1_parameter_count(verdict):
    P = param_count(Architecture(1, 2, 100))
    verdict(1, P == 10401, f"P = {P} for (p=1, L=2, r=100)")


def _min_preactivation(net, theta, x):
    h = x.reshape(1, -1)
    smallest = math.inf
    for W, v in net.unpack(theta)[:-1]:
        a = h @ W.T + v
        smallest = min(smallest, float(np.abs(a).min()))
        h = np.maximum(a, 0.0)
    return smallest


def test_2_gradient_matches_finite_differences(verdict):
    rng = np.random.default_rng(2)
    h = 1e-6
    worst, cases = 0.0, 0
    while cases < 200:
        p, L, r = (int(v) for v in rng.integers(1, (4, 4, 9)))
        arch = Architecture(p, L, r)
        net = MLP(arch)
        theta, x, y = rng.normal(size=arch.P), rng.uniform(-1, 1, size=p), rng.normal()
        # stay away from ReLU kinks, where the derivative is not defined
        if _min_preactivation(net, theta, x) < 1e-4:
            continue
        g = grad_loss(arch, theta, (x, y))
        fd = np.empty_like(theta)
        for j in range(arch.P):
            e = np.zeros_like(theta)
            e[j] = h
            fd[j] = (loss(arch, theta + e, (x, y)) - loss(arch, theta - e, (x, y))) / (2 * h)
        scale = np.maximum(np.abs(g), np.abs(fd))
        rel = np.divide(np.abs(g - fd), scale, out=np.zeros_like(scale), where=scale > 0)
        worst = max(worst, float(rel.max()))
        cases += 1
    verdict(2, worst <= 1e-4, f"max componentwise relative error {worst:.2e} over {cases} cases (tol 1e-4)")


def test_3_rho_one_unification(verdict):
    data = generate(2000, seed=3)
    net = MLP(Architecture(1, 2, 32))
    theta0 = net.init_params(np.random.default_rng(3))
    runs = {}
    for algo, zeta in (("mala", 0.0), ("smala", 0.0), ("csmala", 1.0)):
        cfg = ChainConfig(
            algo, 2000.0, 1e-4, 0.2 / math.sqrt(net.n_params), rho=1.0, zeta=zeta,
            adapt_zeta=algo == "csmala", burn_in=980, gap=1, draws=20, seed=7,
        )
        path = []
        res = run_chain(net, cfg, data, theta0, monitor=lambda th: path.append(th.copy()) or 0.0)
        runs[algo] = (np.array(path), res.accepted)
    ref_path, ref_acc = runs["mala"]
    dev = max(float(np.abs(p - ref_path).max()) for p, _ in runs.values())
    same_acc = all(np.array_equal(a, ref_acc) for _, a in runs.values())
    ok = ref_path.shape[0] == 1000 and dev <= 1e-12 and same_acc
    verdict(3, ok, f"{ref_path.shape[0]} steps, max deviation {dev:.1e}, identical accept decisions: {same_acc}")


def test_4_stationarity_oracle(verdict):
    n, lam, rho = 10, 5.0, 0.5
    ys = toy_data(n, seed=0)
    data = Dataset(np.zeros((n, 1)), ys)
    cfg = ChainConfig(
        "csmala", lam, 0.05, 0.5, rho=rho, zeta=1.0, adapt_zeta=False,
        burn_in=5000, gap=1, draws=200_000, restart_patience=None, seed=4,
    )
    res = run_chain(ConstantModel(bound=1.0), cfg, data, [float(np.mean(ys))])
    counts, _ = np.histogram(res.draws[:, 0], bins=50, range=(-1.0, 1.0))
    target = bin_masses(tilde_density(ys, lam, rho, make_grid()), 50)
    tv = 0.5 * float(np.abs(counts / counts.sum() - target).sum())
    verdict(4, tv < 0.05, f"TV distance {tv:.4f} over 2e5 post-burn-in states (tol 0.05)")


def test_5_kl_bound_sweep(verdict):
    rows = sweep(n=10, lam_factors=(0.25, 0.5, 1.0), rhos=(0.1, 0.5, 0.9), seeds=range(20))
    bad = [r for r in rows if not r["ok"]]
    worst = max(
        max(r["kl_bar_gibbs"] / r["bound1a"], r["kl_bar_varpi"] / r["bound1b"], r["kl_tilde_gibbs_reduced"] / r["bound2"])
        for r in rows
    )
    verdict(5, len(rows) == 180 and not bad, f"{len(rows)} cells, {len(bad)} violations, largest KL/bound {worst:.3g}")


def test_6_accepted_batch_bias(verdict, fleet_dir):
    # a single desk-scale run (seed 0) per algorithm; these chains are reused by the ordering check
    plan = ExperimentPlan(rhos=(0.1,), n_chains=1, algos=("smala", "csmala"), **FLEET)
    cells = {c["algo"]: c for c in run_experiment(plan, fleet_dir / "rho0.1")["cells"]}
    target = 2000 * 0.1
    s, c = cells["smala"], cells["csmala"]
    s_ok = s["accepted_batch_mean"] < target - 2 * s["accepted_batch_se"]
    c_ok = abs(c["accepted_batch_mean"] - target) <= 2 * c["accepted_batch_se"]
    detail = (
        f"n*rho = {target:g}; sMALA mean |Z| {s['accepted_batch_mean']:.2f} (SE {s['accepted_batch_se']:.3f}), "
        f"csMALA {c['accepted_batch_mean']:.2f} (SE {c['accepted_batch_se']:.3f})"
    )
    verdict(6, s_ok and c_ok, detail)


def test_7_risk_ordering(verdict, fleet_rho01):
    cells, _ = fleet_rho01
    m, s, c = (np.array(cells[a]["posterior_mean_risk"]) for a in ("mala", "smala", "csmala"))
    cs_below = int(np.sum(c < s))
    mala_le = int(np.sum(m <= c))
    detail = (
        f"posterior-mean risks mala {np.round(m, 6).tolist()}, smala {np.round(s, 6).tolist()}, "
        f"csmala {np.round(c, 6).tolist()}; csMALA < sMALA in {cs_below}/3, MALA <= csMALA in {mala_le}/3"
    )
    verdict(7, cs_below == 3 and mala_le >= 2, detail)


def test_8_scaling(verdict, fleet_dir):
    plan = ExperimentPlan(algos=("smala", "csmala"), n_chains=5, n_val=2000, monitor_every=100)
    points = run_scaling(plan, [2000, 4000, 8000], 400, fleet_dir / "scaling")
    risks = {(p["algo"], p["n"]): np.array(p["risks"]) for p in points}
    cs_dec = int(np.sum(risks["csmala", 8000] < risks["csmala", 2000]))
    s_flat = int(np.sum(risks["smala", 8000] >= risks["smala", 2000]))
    means = {k: float(v.mean()) for k, v in risks.items()}
    detail = (
        f"csMALA risk(8000) < risk(2000) in {cs_dec}/5 seeds; sMALA without decrease in {s_flat}/5; "
        + ", ".join(f"{a}@{n}={means[a, n]:.2e}" for a in ("smala", "csmala") for n in (2000, 4000, 8000))
    )
    verdict(8, cs_dec >= 4 and s_flat >= 4, detail)


def test_9_coverage_and_radii(verdict, fleet_rho05):
    cells, _ = fleet_rho05
    cov = {a: cells[a]["coverage"] for a in ("mala", "smala", "csmala")}
    radii = {a: cells[a]["radius_mean"] for a in ("mala", "smala", "csmala")}
    ok = all(v == 1.0 for v in cov.values()) and radii["mala"] <= radii["csmala"] <= radii["smala"]
    detail = "; ".join(
        f"{a} coverage {cov[a]:.0%}, radius {1e3 * radii[a]:.2f}+-{1e3 * cells[a]['radius_sd']:.2f} e-3"
        for a in ("mala", "csmala", "smala")
    )
    verdict(9, ok, detail)


def test_10_sample_determinism(verdict, tmp_path):
    args = ["sample", "--algos", "mala,smala,csmala", "--rhos", "0.3", "--chains", "1",
            "--burn-in", "60", "--gap", "5", "--draws", "4", "--pretrain-steps", "100"]
    for d in ("first", "second"):
        assert cli_main(["--seed", "11", "--out-dir", str(tmp_path / d), *args]) == 0
    files = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first" / "chains").rglob("*") if p.is_file())
    same = [(tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes() for f in files]
    verdict(10, len(files) == 12 and all(same), f"{sum(same)}/{len(files)} trace files byte-identical")
