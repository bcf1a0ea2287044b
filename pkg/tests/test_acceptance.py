"""Acceptance suite: one test per criterion, each printing its pass line.

The two benchmark criteria (method ordering, data-size trend) drive the full
desk-scale sweep through run_grid with per-run checkpoints. The sweep caches
its results under .acceptance_cache in the repo so re-runs are fast; delete
that directory for a cold run.
"""

import math
import os
import time

import numpy as np
import pytest

from twostage_cltr.clicksim import ExaminationModel
from twostage_cltr.errors import GuardError
from twostage_cltr.estimator import doc_weights_exact, doc_weights_mc
from twostage_cltr.experiment import ExperimentConfig, desk_preset, grid_to_csv, run_grid
from twostage_cltr.validation import (
    gradients_suite,
    random_tiny_world,
    sampler_suite,
    unbiasedness_suite,
)

CACHE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".acceptance_cache")


def report(criterion, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] acceptance {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


class TestCriterion1Unbiasedness:
    def test_expected_ips_equals_true_utility(self):
        t0 = time.perf_counter()
        rep = unbiasedness_suite(n_worlds=50, seed=1234, tol=1e-10)
        dt = time.perf_counter() - t0
        report(
            "1 (unbiasedness)",
            rep.passed and dt < 60,
            f"{rep.lines[1]}, runtime {dt:.1f}s < 60s",
        )


class TestCriterion2Sampler:
    def test_chi_square_and_tv(self):
        t0 = time.perf_counter()
        rep = sampler_suite(seed=99, n_samples=200_000, significance=0.001)
        dt = time.perf_counter() - t0
        report(
            "2 (sampler)",
            rep.passed and dt < 10,
            "; ".join(rep.lines[1:]) + f", runtime {dt:.1f}s < 10s",
        )


class TestCriterion3Gradients:
    def test_exact_fd_and_mc(self):
        t0 = time.perf_counter()
        rep = gradients_suite(seed=4321, n_worlds=3, fd_tol=1e-6, mc_total=20_000, mc_chunks=20)
        dt = time.perf_counter() - t0
        report(
            "3 (gradients)",
            rep.passed and dt < 120,
            "; ".join(rep.lines[1:]) + f", runtime {dt:.1f}s < 120s",
        )


class TestCriterion4SlotMass:
    def test_exact_and_mc_at_300_samples(self):
        rng = np.random.default_rng(7)
        exam = ExaminationModel()
        worst_exact = 0.0
        worst_mc = 0.0
        for _ in range(10):
            world = random_tiny_world(rng)
            target = sum(1.0 / k for k in range(1, world.K + 1))
            exact = doc_weights_exact(world.cand, world.rr, 0, world.K2, world.K, exam)
            worst_exact = max(worst_exact, abs(exact.values.sum() - target))
            mc = doc_weights_mc(world.cand, world.rr, 0, world.K2, world.K, 300, exam, rng)
            # every sample contributes each display slot exactly once, so the
            # MC sum is deterministic up to float addition order
            se = float(np.sqrt((mc.errs**2).sum()))
            worst_mc = max(worst_mc, abs(mc.values.sum() - target) - 3 * se)
        report(
            "4 (slot mass)",
            worst_exact < 1e-12 and worst_mc <= 1e-9,
            f"exact max err {worst_exact:.2e}, MC (300 samples) within 3 SE + 1e-9",
        )


def acceptance_config(**overrides):
    base = desk_preset(out_dir=CACHE_DIR, workers=2, master_seed=17)
    data = base.to_dict()
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


@pytest.fixture(scope="module")
def desk_grid():
    """Criteria 5 and 6 share one checkpointed sweep."""
    config = acceptance_config()
    cells = [(regime, 100, 100_000) for regime in ("baseline", "independent", "joint")]
    cells += [("joint", 100, 25_000), ("joint", 100, 50_000)]
    return run_grid(config, cells=cells)


class TestCriterion5MethodOrdering:
    def test_joint_beats_independent_beats_baseline(self, desk_grid):
        K2, N = 100, 100_000
        means = {r: desk_grid.mean(r, K2, N) for r in ("baseline", "independent", "joint")}
        ses = {r: desk_grid.se(r, K2, N) for r in ("baseline", "independent", "joint")}
        pooled = math.sqrt(ses["joint"] ** 2 + ses["baseline"] ** 2)
        ordered = means["joint"] > means["independent"] > means["baseline"]
        separated = (means["joint"] - means["baseline"]) > 2 * pooled
        detail = (
            f"joint {means['joint']:.4f} ({ses['joint']:.4f}) > "
            f"independent {means['independent']:.4f} ({ses['independent']:.4f}) > "
            f"baseline {means['baseline']:.4f} ({ses['baseline']:.4f}); "
            f"joint-baseline = {means['joint'] - means['baseline']:.4f} > 2*pooled SE = {2 * pooled:.4f}"
        )
        report("5 (method ordering)", ordered and separated, detail)


class TestCriterion6DataSizeTrend:
    def test_joint_non_decreasing_in_n(self, desk_grid):
        ns = (25_000, 50_000, 100_000)
        means = [desk_grid.mean("joint", 100, n) for n in ns]
        ses = [desk_grid.se("joint", 100, n) for n in ns]
        inversions = 0
        ok = True
        for i in range(len(ns) - 1):
            if means[i + 1] < means[i]:
                inversions += 1
                pooled = math.sqrt(ses[i] ** 2 + ses[i + 1] ** 2)
                if means[i] - means[i + 1] > pooled or inversions > 1:
                    ok = False
        detail = "NDCG@10 over N: " + ", ".join(
            f"{n}: {m:.4f} ({s:.4f})" for n, m, s in zip(ns, means, ses)
        ) + f"; inversions {inversions} (allowed: one within 1 pooled SE)"
        report("6 (data-size trend)", ok, detail)


class TestCriterion7ExaminationModel:
    def test_inverse_rank_with_cutoff(self):
        exam = ExaminationModel()
        ok = all(exam.prob(k) == 1.0 / k for k in range(1, 11))
        ok = ok and all(exam.prob(k) == 0.0 for k in range(11, 1001))
        report("7 (examination model)", ok, "prob(k) = 1/k for k <= 10, 0 for 11..1000")


class TestCriterion8Determinism:
    def test_rerun_and_worker_count_bitwise_identical(self, tmp_path):
        overrides = dict(
            synth_users=90, synth_items=40, k2_list=(10,), n_list=(500,),
            regimes=("baseline", "independent", "joint"), n_runs=2, n_mc=6,
            batch_size=16, n_epochs=1, n_mc_eval=8, ndcg_samples=8,
            logging_train_steps=10, logging_n_mc=4, K=4, embedding_dim=8,
            master_seed=23,
        )
        csvs = []
        for i, workers in enumerate((1, 2, 1)):
            cfg = acceptance_config(out_dir=str(tmp_path / f"run{i}"), workers=workers, **overrides)
            csvs.append(grid_to_csv(run_grid(cfg)))
        report(
            "8 (determinism)",
            csvs[0] == csvs[1] == csvs[2],
            "grid.csv bitwise identical across re-runs and worker counts 1/2",
        )
