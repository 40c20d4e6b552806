import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import csmala.experiments as ex
from csmala.experiments import (
    ExperimentPlan,
    build_report,
    moving_average,
    resolve_threads,
    run_experiment,
    run_scaling,
    run_toy_kl,
)


def tiny_plan(**kw):
    base = dict(
        rhos=(0.5,),
        n_chains=2,
        n=60,
        width=4,
        pretrain_steps=10,
        overrides=dict(burn_in=30, gap=5, draws=3),
    )
    base.update(kw)
    return ExperimentPlan(**base)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestMovingAverage:
    def test_window_one_is_identity(self, rng):
        x = rng.normal(size=50)
        np.testing.assert_array_equal(moving_average(x, 1), x)

    def test_hand_values(self):
        np.testing.assert_allclose(moving_average([1.0, 2.0, 3.0, 4.0, 5.0], 3), [1.5, 2.0, 3.0, 4.0, 4.5])

    def test_window_longer_than_series(self):
        np.testing.assert_allclose(moving_average([0.0, 3.0], 1501), [1.5, 1.5])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60), st.integers(0, 20))
    def test_matches_naive_oracle(self, x, half):
        w = 2 * half + 1
        oracle = [math.fsum(x[max(0, i - half) : i + half + 1]) / len(x[max(0, i - half) : i + half + 1]) for i in range(len(x))]
        np.testing.assert_allclose(moving_average(x, w), oracle, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("w", [0, 2, -3])
    def test_invalid_window(self, w):
        with pytest.raises(ValueError):
            moving_average([1.0], w)


class TestThreads:
    def test_explicit(self, monkeypatch):
        monkeypatch.setenv("CSMALA_THREADS", "7")
        assert resolve_threads(3) == 3

    def test_env(self, monkeypatch):
        monkeypatch.setenv("CSMALA_THREADS", "4")
        assert resolve_threads() == 4

    def test_default(self, monkeypatch):
        monkeypatch.delenv("CSMALA_THREADS", raising=False)
        assert resolve_threads() == 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            resolve_threads(0)


class TestPlan:
    def test_desk_defaults(self):
        p = ExperimentPlan()
        assert (p.train_size, p.val_size, p.arch.r, p.arch.L, p.n_chains) == (2000, 2000, 32, 2, 10)
        assert p.seeds() == list(range(10))

    def test_full_scale(self):
        p = ExperimentPlan(desk_scale=False)
        assert (p.train_size, p.arch.P) == (10_000, 10401)
        cfg = p.chain_config("csmala", 0.5, 3)
        assert (cfg.burn_in, cfg.gap, cfg.draws, cfg.lam, cfg.seed) == (200_000, 5000, 20, 15_000.0, 3)

    def test_overrides_apply(self):
        cfg = tiny_plan().chain_config("mala", 0.5, 0)
        assert (cfg.burn_in, cfg.gap, cfg.draws, cfg.lam) == (30, 5, 3, 60.0)

    def test_round_trip(self):
        p = tiny_plan(algos=("smala", "csmala"))
        assert ExperimentPlan.from_dict(json.loads(json.dumps(p.to_dict()))) == p

    @pytest.mark.parametrize("kw", [dict(rhos=(0.0,)), dict(rhos=(1.5,)), dict(algos=("sgld",)), dict(n_chains=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny_plan(**kw)


class TestRunExperiment:
    def test_exports_and_reproducible_report(self, tmp_path):
        summary = run_experiment(tiny_plan(), tmp_path)
        assert len(summary["cells"]) == 3 and summary["quarantined"] == []
        names = ["radii.csv", "summary.json"] + [
            f"{kind}_{a}_0.5.csv" for kind in ("risk_curve", "accepted_batch_hist") for a in ("mala", "smala", "csmala")
        ]
        before = {n: (tmp_path / n).read_bytes() for n in names}
        rows = read_csv(tmp_path / "risk_curve_csmala_0.5.csv")
        assert rows[0] == ["step", "ma_risk_min", "ma_risk_mean", "ma_risk_max"] and len(rows) == 1 + 45
        assert all(float(r[1]) <= float(r[2]) <= float(r[3]) for r in rows[1:])
        assert read_csv(tmp_path / "radii.csv")[0][:4] == ["rho", "mala_radius_mean", "mala_radius_sd", "mala_coverage"]
        assert read_csv(tmp_path / "accepted_batch_hist_mala_0.5.csv")[0] == ["bin_lo", "bin_hi", "count"]
        for n in names:
            (tmp_path / n).unlink()
        build_report(tmp_path)
        assert {n: (tmp_path / n).read_bytes() for n in names} == before

    def test_histogram_counts_accepted_post_burn_in(self, tmp_path):
        run_experiment(tiny_plan(algos=("smala",)), tmp_path)
        total = sum(int(r[2]) for r in read_csv(tmp_path / "accepted_batch_hist_smala_0.5.csv")[1:])
        expected = 0
        for seed in (0, 1):
            trace = read_csv(tmp_path / "chains" / f"smala_0.5_seed{seed}" / "trace.csv")[1:]
            expected += sum(int(r[1]) for r in trace if int(r[0]) > 30)
        assert total == expected

    def test_coverage_scores_each_chain_on_its_own_truth(self, tmp_path, monkeypatch):
        # seeds draw different validation inputs; a radius equal to each chain's own
        # truth distance must count as covered for every chain
        real = ex.credible_radius

        def own_truth_radius(samples, X, alpha):
            report = real(samples, X, alpha)
            mean = ex.posterior_mean_predict(samples, X)
            report.radius = float(np.mean((mean - ex.datamod.true_f(X[:, 0])) ** 2))
            return report

        monkeypatch.setattr(ex, "credible_radius", own_truth_radius)
        summary = run_experiment(tiny_plan(n_chains=4, algos=("mala",)), tmp_path)
        assert summary["cells"][0]["coverage"] == 1.0

    def test_rho_one_cell_unifies(self, tmp_path):
        summary = run_experiment(tiny_plan(rhos=(1.0,), n_chains=1), tmp_path)
        risks = {c["algo"]: c["posterior_mean_risk"][0] for c in summary["cells"]}
        assert risks["mala"] == pytest.approx(risks["smala"], abs=1e-12)
        assert risks["mala"] == pytest.approx(risks["csmala"], abs=1e-12)

    def test_all_algorithms_share_the_start_point(self, tmp_path):
        run_experiment(tiny_plan(n_chains=1), tmp_path)
        assert len(list((tmp_path / "pretrain").iterdir())) == 1

    def test_failed_cell_is_quarantined(self, tmp_path, monkeypatch):
        real = ex.run_chain

        def flaky(model, config, *a, **k):
            if config.algo == "smala":
                raise FloatingPointError("boom")
            return real(model, config, *a, **k)

        monkeypatch.setattr(ex, "run_chain", flaky)
        summary = run_experiment(tiny_plan(), tmp_path)
        assert summary["quarantined"] == [["smala", 0.5]]
        assert {c["algo"] for c in summary["cells"]} == {"mala", "csmala"}
        failures = json.loads((tmp_path / "failures.json").read_text())
        assert len(failures) == 2 and "boom" in failures[0]["error"]
        assert not (tmp_path / "risk_curve_smala_0.5.csv").exists()

    def test_completed_chains_are_reused(self, tmp_path, monkeypatch):
        run_experiment(tiny_plan(algos=("mala",)), tmp_path)
        monkeypatch.setattr(ex, "run_chain", lambda *a, **k: pytest.fail("chain was recomputed"))
        run_experiment(tiny_plan(algos=("mala",)), tmp_path)


class TestScaling:
    def test_single_point_at_rho_one(self, tmp_path):
        pts = run_scaling(tiny_plan(n_chains=1), [60], 60, tmp_path)
        assert [p["rho"] for p in pts] == [1.0, 1.0, 1.0]
        assert len({round(p["risk_mean"], 12) for p in pts}) == 1
        rows = read_csv(tmp_path / "scaling.csv")
        assert rows[0] == ["n", "rho", "algo", "risk_mean", "risk_sd"] and len(rows) == 4

    def test_rho_above_one_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            run_scaling(tiny_plan(), [50], 60, tmp_path)


class TestToyKL:
    def test_sweep_json(self, tmp_path):
        rows, violations = run_toy_kl(tmp_path, seeds=range(2))
        assert violations == 0 and len(rows) == 18
        stored = json.loads((tmp_path / "toy_kl.json").read_text())
        keys = {"lambda", "rho", "kl_bar_gibbs", "bound1a", "kl_bar_varpi", "bound1b", "kl_tilde_gibbs_reduced", "bound2"}
        assert keys <= set(stored[0])

    def test_zero_temperature_cells(self, tmp_path):
        rows, violations = run_toy_kl(tmp_path, seeds=range(1), lam_factors=(0.0,))
        assert violations == 0
        for r in rows:
            assert r["kl_bar_gibbs"] == pytest.approx(0.0, abs=1e-12) and r["bound1a"] == 0.0
            assert r["kl_tilde_gibbs_reduced"] == pytest.approx(0.0, abs=1e-12) and r["bound2"] == 0.0

    def test_rho_one_cells(self, tmp_path):
        rows, _ = run_toy_kl(tmp_path, seeds=range(1), rhos=(1.0,))
        for r in rows:
            assert r["kl_bar_gibbs"] == pytest.approx(0.0, abs=1e-10)
        assert json.loads((tmp_path / "toy_kl.json").read_text())[0]["bound1b"] is None
