import numpy as np
import pytest

from twostage_cltr.validation import (
    SUITES,
    exact_propensity_table,
    expected_ips_utility,
    random_tiny_world,
    run_suite,
    sampler_suite,
    score_policy,
    unbiasedness_suite,
)


class TestSuitePlumbing:
    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError):
            run_suite("nope")

    def test_registry_names(self):
        assert set(SUITES) == {"unbiasedness", "gradients", "sampler"}

    def test_report_renders(self):
        rep = sampler_suite(seed=1, n_samples=20_000)
        text = str(rep)
        assert "sampler" in text and ("PASS" in text or "FAIL" in text)


class TestTinyWorlds:
    def test_worlds_respect_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = random_tiny_world(rng)
            assert 2 <= w.n_items <= 5
            assert 1 <= w.K <= 2
            assert w.K <= w.K2 <= min(4, w.n_items)

    def test_score_policy_exposes_scores(self):
        from twostage_cltr.policy import scores

        pol = score_policy(np.array([[0.5, -0.5, 1.0]]))
        np.testing.assert_allclose(scores(pol, 0, np.arange(3)), [0.5, -0.5, 1.0])

    def test_exact_propensity_table_positive(self):
        world = random_tiny_world(np.random.default_rng(3))
        table = exact_propensity_table(world)
        for q in range(world.n_users):
            assert (table.rho_by_query[q] > 0).all()

    def test_expected_utility_matches_truth_on_one_world(self):
        from twostage_cltr.estimator import true_utility

        world = random_tiny_world(np.random.default_rng(5))
        rho0 = exact_propensity_table(world)
        lhs = expected_ips_utility(world, rho0)
        rhs = true_utility(
            world.cand, world.rr, world.rel, world.users, world.K2, world.K,
            world.exam, 1, np.random.default_rng(0),
        ).value
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestUnbiasednessSmall:
    def test_five_worlds_fast(self):
        rep = unbiasedness_suite(n_worlds=5, seed=10)
        assert rep.passed
