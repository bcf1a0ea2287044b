import hashlib
import math

import numpy as np
import pytest

from twostage_cltr.clicksim import ClickLog, ExaminationModel, estimate_propensities, simulate_log
from twostage_cltr.errors import ConfigError
from twostage_cltr.estimator import doc_weights_single_exact
from twostage_cltr.policy import (
    FactorModel,
    PLPolicy,
    enumerate_prefix_probs,
    score_grad_from_scores,
)
from twostage_cltr.trainer import (
    GradAccumulator,
    OptimizerState,
    TrainConfig,
    aggregate_click_weights,
    exact_ips_grads_from_scores,
    grad_candidate_batch,
    grad_reranker_batch,
    optimizer_step,
    pretrain_reranker,
    train,
)
from twostage_cltr.validation import (
    exact_propensity_table,
    random_tiny_world,
    score_policy,
    _simulated_tiny_log,
)

EXAM = ExaminationModel()


def checksum(model):
    return hashlib.sha256(model.user_vecs.tobytes() + model.item_vecs.tobytes()).hexdigest()


class TestGradAccumulator:
    def test_merge_tree_matches_sequential(self, rng):
        accs = []
        seq = GradAccumulator()
        for _ in range(7):
            acc = GradAccumulator()
            for u in rng.integers(0, 4, size=3):
                vec = rng.standard_normal(5)
                acc.add_user(int(u), vec)
                seq.add_user(int(u), vec)
            ids = rng.integers(0, 6, size=4)
            mat = rng.standard_normal((4, 5))
            acc.add_item_rows(ids, mat)
            seq.add_item_rows(ids, mat)
            accs.append(acc)
        merged = GradAccumulator.merge(accs)
        for u, vec in seq.user_rows.items():
            np.testing.assert_allclose(merged.user_rows[u], vec, atol=1e-12)
        for d, vec in seq.item_rows.items():
            np.testing.assert_allclose(merged.item_rows[d], vec, atol=1e-12)

    def test_scale(self):
        acc = GradAccumulator()
        acc.add_user(0, np.ones(3))
        acc.scale(0.5)
        np.testing.assert_allclose(acc.user_rows[0], 0.5 * np.ones(3))


class TestOptimizer:
    def test_zero_gradient_leaves_model(self, rng):
        model = FactorModel(rng.standard_normal((2, 3)), rng.standard_normal((4, 3)))
        before = checksum(model)
        state = OptimizerState.for_model(model)
        optimizer_step(state, model, GradAccumulator())
        assert checksum(model) == before
        assert state.step == 1

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        model = FactorModel(np.zeros((1, 1)), np.zeros((1, 1)))
        state = OptimizerState.for_model(model, learning_rate=0.01)
        prev = 0.0
        for _ in range(200):
            acc = GradAccumulator()
            acc.add_user(0, np.array([2.5]))
            optimizer_step(state, model, acc)
        step = model.user_vecs[0, 0] - prev  # cumulative; check the last step size
        before = model.user_vecs[0, 0]
        acc = GradAccumulator()
        acc.add_user(0, np.array([2.5]))
        optimizer_step(state, model, acc)
        assert model.user_vecs[0, 0] - before == pytest.approx(0.01, rel=1e-3)

    def test_quadratic_maximization_converges(self):
        # maximize -(x - 0.37)^2 by ascent on its gradient
        target = 0.37
        model = FactorModel(np.zeros((1, 1)), np.zeros((1, 1)))
        state = OptimizerState.for_model(model, learning_rate=0.01)
        for _ in range(2000):
            x = model.user_vecs[0, 0]
            acc = GradAccumulator()
            acc.add_user(0, np.array([-2 * (x - target)]))
            optimizer_step(state, model, acc)
        assert abs(model.user_vecs[0, 0] - target) < 1e-3

    def test_nonfinite_gradient_fails_fast(self):
        model = FactorModel(np.zeros((1, 2)), np.zeros((1, 2)))
        state = OptimizerState.for_model(model)
        acc = GradAccumulator()
        acc.add_user(0, np.array([np.nan, 0.0]))
        with pytest.raises(FloatingPointError, match="user"):
            optimizer_step(state, model, acc)

    def test_only_touched_rows_move(self, rng):
        model = FactorModel(rng.standard_normal((3, 2)), rng.standard_normal((5, 2)))
        untouched_user = model.user_vecs[2].copy()
        untouched_item = model.item_vecs[4].copy()
        state = OptimizerState.for_model(model)
        acc = GradAccumulator()
        acc.add_user(0, np.ones(2))
        acc.add_item_rows(np.array([1, 3]), np.ones((2, 2)))
        optimizer_step(state, model, acc)
        np.testing.assert_array_equal(model.user_vecs[2], untouched_user)
        np.testing.assert_array_equal(model.item_vecs[4], untouched_item)


def one_click_batch(n_items, query=0, clicked_item=0, K=2):
    displayed = np.array([[clicked_item, (clicked_item + 1) % n_items]])
    clicks = np.array([[1, 0]], dtype=np.uint8)
    return ClickLog(np.array([query]), displayed, clicks)


class TestGradientBatches:
    def test_zero_clicks_zero_gradient(self, rng):
        world = random_tiny_world(np.random.default_rng(0))
        log, rho0 = _simulated_tiny_log(world, 20, np.random.default_rng(1))
        log.clicks[:] = 0
        config = TrainConfig(regime="joint", K2=world.K2, K=world.K, n_mc=8, batch_size=20)
        acc = grad_candidate_batch(world.cand, world.rr, list(log), rho0, config, rng)
        assert not acc.user_rows and not acc.item_rows

    def test_empty_batch_rejected(self, rng):
        world = random_tiny_world(np.random.default_rng(0))
        _, rho0 = _simulated_tiny_log(world, 5, np.random.default_rng(1))
        config = TrainConfig(regime="joint", K2=world.K2, K=world.K, n_mc=4)
        with pytest.raises(ValueError):
            grad_candidate_batch(world.cand, world.rr, [], rho0, config, rng)

    def test_mc_candidate_matches_exact(self, rng):
        world = random_tiny_world(np.random.default_rng(3))
        log, rho0 = _simulated_tiny_log(world, 60, np.random.default_rng(4))
        while not log.clicks.any():
            log, rho0 = _simulated_tiny_log(world, 60, np.random.default_rng(5))
        alpha = EXAM.probs(world.K)
        weights = aggregate_click_weights(log, rho0, world.n_items)
        config = TrainConfig(regime="joint", K2=world.K2, K=world.K, n_mc=1000, batch_size=60)
        chunks = {q: [] for q in weights}
        for _ in range(20):
            acc = grad_candidate_batch(world.cand, world.rr, list(log), rho0, config, rng)
            for q in weights:
                chunks[q].append(acc.user_rows.get(q, np.zeros(world.n_items)).copy())
        from twostage_cltr.policy import scores as pol_scores

        catalog = np.arange(world.n_items)
        for q, wts in weights.items():
            _, g_c, _ = exact_ips_grads_from_scores(
                pol_scores(world.cand, q, catalog), pol_scores(world.rr, q, catalog),
                wts / len(log), world.K2, world.K, alpha,
            )
            stack = np.stack(chunks[q])
            se = stack.std(axis=0, ddof=1) / math.sqrt(len(stack))
            z = np.abs(stack.mean(axis=0) - g_c) / np.maximum(se, 1e-12)
            assert z.max() <= 4.0  # 20k samples, every coordinate

    def test_reranker_reduces_to_single_stage_when_k2_is_catalog(self, rng):
        # uniform candidate over the whole catalog: re-ranker gradient becomes the
        # plain policy-aware single-stage gradient
        n, K = 4, 2
        rr_scores = np.array([0.6, -0.3, 0.2, -0.8])
        cand = score_policy(np.zeros((1, n)))
        rr = score_policy(rr_scores)
        rho = {0: {d: 0.4 for d in range(n)}}
        from twostage_cltr.clicksim import PropensityTable

        table = PropensityTable(floor=0.4)
        table.items_by_query[0] = np.arange(n)
        table.rho_by_query[0] = np.full(n, 0.4)
        table.impressions[0] = 1
        log = one_click_batch(n, clicked_item=2, K=K)
        config = TrainConfig(regime="joint", K2=n, K=K, n_mc=2000, batch_size=1)

        # oracle: E_y[w(y) grad log pi(y)] over the single policy, exact enumeration
        alpha = EXAM.probs(K)
        expected = np.zeros(n)
        for y, p in enumerate_prefix_probs(rr_scores, K):
            w = sum(alpha[t] / 0.4 for t, d in enumerate(y) if d == 2)
            expected += p * w * score_grad_from_scores(rr_scores, np.array(y))

        chunks = []
        for _ in range(20):
            acc = grad_reranker_batch(cand, rr, list(log), table, config, rng)
            chunks.append(acc.user_rows[0].copy())
        stack = np.stack(chunks)
        se = stack.std(axis=0, ddof=1) / math.sqrt(len(stack))
        z = np.abs(stack.mean(axis=0) - expected) / np.maximum(se, 1e-12)
        assert z.max() <= 4.0


def tiny_training_setup(seed, n_users=3, n_items=6, K2=4, K=2, n_records=400):
    rng = np.random.default_rng(seed)
    from twostage_cltr.clicksim import TwoStageLoggingPolicy

    logging = TwoStageLoggingPolicy(
        score_policy(rng.uniform(-1, 1, (n_users, n_items)), 2.0),
        score_policy(rng.uniform(-1, 1, (n_users, n_items)), 2.0),
        K2, K,
    )

    class R:
        rel = (rng.random((n_users, n_items)) < 0.5).astype(np.uint8)

    log = simulate_log(logging, R, np.arange(n_users), n_records, EXAM, rng)
    rho0 = estimate_propensities(log, EXAM, floor=1.0 / K2)
    init = FactorModel(rng.standard_normal((n_users, 4)) * 0.1, rng.standard_normal((n_items, 4)) * 0.1)
    return log, rho0, init, R


class TestPretrainReranker:
    def test_zero_click_log_returns_init(self):
        log, rho0, init, _ = tiny_training_setup(0)
        log.clicks[:] = 0
        config = TrainConfig(regime="baseline", K2=4, K=2, n_mc=8, batch_size=32, n_epochs=2)
        pol = pretrain_reranker(log, rho0, init, config, np.random.default_rng(0))
        assert checksum(pol.model) == checksum(init)

    def test_utility_nondecreasing_within_noise(self):
        log, rho0, init, _ = tiny_training_setup(1)
        config = TrainConfig(
            regime="baseline", K2=4, K=2, n_mc=32, batch_size=32, n_epochs=6,
            patience=10, n_mc_eval=256, utility_train_sample=200,
        )
        from twostage_cltr.trainer import _train_single_stage_loop, prepare_records, _split_validation

        prepared = prepare_records(log, rho0)
        rng = np.random.default_rng(2)
        tr, va = _split_validation(len(prepared), 0.1, rng)
        model, hist = _train_single_stage_loop(
            init.copy(), [prepared[i] for i in tr], [prepared[i] for i in va],
            config, rng, "pretrain_rr", 6,
        )
        u = [h.u_train for h in hist]
        assert u[-1] >= u[0] - 0.05

    def test_small_world_convergence_ranks_relevant_first(self):
        # one user, one relevant item, exact propensities, plentiful clicks
        rng = np.random.default_rng(7)
        from twostage_cltr.clicksim import TwoStageLoggingPolicy

        n = 4
        logging = TwoStageLoggingPolicy(
            score_policy(np.zeros((1, n))), score_policy(np.zeros((1, n))), K2=n, K=2
        )

        class R:
            rel = np.array([[1, 0, 0, 0]], dtype=np.uint8)

        log = simulate_log(logging, R, np.arange(1), 3000, EXAM, rng)
        world_rho = exact_propensity_table(
            type("W", (), {
                "n_users": 1, "n_items": n, "K2": n, "K": 2,
                "logging": logging, "exam": EXAM,
            })()
        )
        init = FactorModel(np.zeros((1, 2)), rng.standard_normal((n, 2)) * 0.01)
        config = TrainConfig(
            regime="baseline", K2=n, K=2, n_mc=64, batch_size=64, n_epochs=8,
            patience=8, n_mc_eval=128, validation_frac=0.05,
        )
        pol = pretrain_reranker(log, world_rho, init, config, rng)
        est = doc_weights_single_exact(pol, 0, 1, EXAM)
        assert est.weight(0) > 0.9  # P(relevant item ranked first)


class TestTrainRegimes:
    def test_unknown_regime(self):
        log, rho0, init, _ = tiny_training_setup(3)
        config = TrainConfig(regime="joint", K2=4, K=2, n_mc=4, batch_size=16, n_epochs=1)
        with pytest.raises(ConfigError):
            train("bogus", log, rho0, (init, init), config, np.random.default_rng(0))

    def test_zero_learning_rate_keeps_init(self):
        log, rho0, init, _ = tiny_training_setup(4)
        config = TrainConfig(
            regime="joint", K2=4, K=2, n_mc=4, batch_size=16, n_epochs=2,
            learning_rate=0.0, n_mc_eval=8,
        )
        cand, rr, _ = train("joint", log, rho0, (init, init), config, np.random.default_rng(0))
        assert checksum(cand.model) == checksum(init)
        assert checksum(rr.model) == checksum(init)

    def test_alternation_parity(self):
        log, rho0, init, _ = tiny_training_setup(5)
        config = TrainConfig(
            regime="joint", K2=4, K=2, n_mc=4, batch_size=25, n_epochs=4,
            patience=10, n_mc_eval=8, validation_frac=0.0,
        )
        _, _, hist = train("joint", log, rho0, (init, init), config, np.random.default_rng(0))
        n_c = sum(h.n_cand_updates for h in hist)
        n_r = sum(h.n_rr_updates for h in hist)
        assert n_c == n_r  # 400 records / 25 per batch = 16 batches/epoch, even total

    def test_baseline_freezes_reranker_after_pretraining(self):
        log, rho0, init, _ = tiny_training_setup(6)
        config = TrainConfig(
            regime="baseline", K2=4, K=2, n_mc=8, batch_size=32, n_epochs=2, n_mc_eval=8,
        )
        rng = np.random.default_rng(0)
        rr_ref = pretrain_reranker(log, rho0, init, config, np.random.default_rng(0))
        cand, rr, _ = train("baseline", log, rho0, (init, init), config, rng)
        assert checksum(rr.model) == checksum(rr_ref.model)
        assert checksum(cand.model) != checksum(init)

    def test_history_csv_columns(self):
        log, rho0, init, _ = tiny_training_setup(8)
        config = TrainConfig(regime="joint", K2=4, K=2, n_mc=4, batch_size=32, n_epochs=1, n_mc_eval=8)
        _, _, hist = train("joint", log, rho0, (init, init), config, np.random.default_rng(0))
        from twostage_cltr.trainer import history_to_csv

        csv = history_to_csv(hist)
        assert csv.splitlines()[0] == "epoch,regime,u_train,u_validation,ndcg10,seconds"
        assert len(csv.splitlines()) == len(hist) + 1

    def test_joint_utility_trend_increases(self):
        log, rho0, init, _ = tiny_training_setup(9, n_records=800)
        config = TrainConfig(
            regime="joint", K2=4, K=2, n_mc=64, batch_size=32, n_epochs=6,
            patience=10, n_mc_eval=256,
        )
        _, _, hist = train("joint", log, rho0, (init, init), config, np.random.default_rng(1))
        vals = [h.u_val for h in hist]
        from scipy.stats import spearmanr

        rho = spearmanr(np.arange(len(vals)), vals).statistic
        assert rho > 0.8
