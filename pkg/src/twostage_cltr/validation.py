"""Oracle suites: sampler correctness, estimator unbiasedness, gradient checks.

Each suite builds tiny randomized worlds where exact enumeration is feasible
and checks the production code paths against it. They are run both by the
test suite and by the `validate` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .clicksim import (
    ClickLog,
    ExaminationModel,
    PropensityTable,
    TwoStageLoggingPolicy,
    exact_propensities,
    simulate_log,
)
from .estimator import doc_weights_exact, ips_utility, true_utility
from .policy import (
    FactorModel,
    PLPolicy,
    enumerate_prefix_probs,
    sample_topk_rows,
    scores,
)
from .trainer import (
    TrainConfig,
    aggregate_click_weights,
    exact_ips_grads_from_scores,
    exact_ips_value_from_scores,
    grad_candidate_batch,
    grad_reranker_batch,
)


@dataclass
class SuiteReport:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        body = "\n".join(f"  {line}" for line in self.lines)
        return f"[{status}] {self.name}\n{body}"


def score_policy(score_rows: np.ndarray, temperature: float = 1.0) -> PLPolicy:
    """Policy whose catalog scores ARE the given rows (identity item embeddings).

    With this construction the accumulated user-row gradient equals the raw
    score-space gradient, which makes enumeration oracles directly comparable
    to the production estimators.
    """
    score_rows = np.atleast_2d(np.asarray(score_rows, dtype=np.float64))
    return PLPolicy(
        FactorModel(user_vecs=score_rows, item_vecs=np.eye(score_rows.shape[1])),
        temperature=temperature,
    )


@dataclass
class TinyWorld:
    """A fully enumerable two-stage setup with separate logging and target policies."""

    n_users: int
    n_items: int
    K2: int
    K: int
    rel: object
    logging: TwoStageLoggingPolicy
    cand: PLPolicy
    rr: PLPolicy
    exam: ExaminationModel

    @property
    def users(self) -> np.ndarray:
        return np.arange(self.n_users)


class _Rel:
    def __init__(self, rel: np.ndarray):
        self.rel = rel


def random_tiny_world(rng: np.random.Generator) -> TinyWorld:
    n_items = int(rng.integers(2, 6))
    n_users = int(rng.integers(1, 4))
    K = int(rng.integers(1, 3))
    K2 = int(rng.integers(K, min(4, n_items) + 1))
    draw = lambda: rng.uniform(-2.0, 2.0, size=(n_users, n_items))
    rel = _Rel((rng.random((n_users, n_items)) < 0.5).astype(np.uint8))
    logging = TwoStageLoggingPolicy(
        candidate=score_policy(draw()), reranker=score_policy(draw()), K2=K2, K=K
    )
    return TinyWorld(
        n_users, n_items, K2, K, rel, logging,
        cand=score_policy(draw()), rr=score_policy(draw()), exam=ExaminationModel(),
    )


def exact_propensity_table(world: TinyWorld) -> PropensityTable:
    """True logging propensities for every (user, item), as a lookup table."""
    rhos = {q: exact_propensities(world.logging, q, world.exam) for q in range(world.n_users)}
    floor = min(min(r.values()) for r in rhos.values()) / 10.0
    table = PropensityTable(floor=floor)
    for q, rho in rhos.items():
        items = np.array(sorted(rho))
        table.items_by_query[q] = items
        table.rho_by_query[q] = np.array([rho[int(d)] for d in items])
        table.impressions[q] = 1
    return table


def expected_ips_utility(world: TinyWorld, rho0: PropensityTable) -> float:
    """Exact expectation of the one-record IPS estimate over queries, rankings, clicks.

    Enumerates every logging (candidate, display) pair and every click
    outcome, then weights the production estimator's per-record contributions
    by the enumeration probabilities.
    """
    cand_log, rr_log = world.logging.candidate, world.logging.reranker
    alpha = world.exam.probs(world.K)
    weight_cache: dict[int, object] = {}

    def weights_fn(q: int):
        if q not in weight_cache:
            weight_cache[q] = doc_weights_exact(world.cand, world.rr, q, world.K2, world.K, world.exam)
        return weight_cache[q]

    catalog = np.arange(world.n_items)
    queries, displays, clicks, probs = [], [], [], []
    for q in range(world.n_users):
        s_c = scores(cand_log, q, catalog)
        s_r = scores(rr_log, q, catalog)
        for y_c, p_c in enumerate_prefix_probs(s_c, world.K2):
            y_c_arr = np.array(y_c)
            for pos_r, p_r in enumerate_prefix_probs(s_r[y_c_arr], world.K):
                y_r = y_c_arr[list(pos_r)]
                p_click = alpha * world.rel.rel[q, y_r]
                clickable = np.flatnonzero(p_click > 0)
                for mask in range(1 << len(clickable)):
                    c = np.zeros(world.K, dtype=np.uint8)
                    p_out = 1.0
                    for b, pos in enumerate(clickable):
                        if (mask >> b) & 1:
                            c[pos] = 1
                            p_out *= p_click[pos]
                        else:
                            p_out *= 1.0 - p_click[pos]
                    queries.append(q)
                    displays.append(y_r)
                    clicks.append(c)
                    probs.append(p_c * p_r * p_out / world.n_users)
    log = ClickLog(
        np.array(queries, dtype=np.int64),
        np.array(displays, dtype=np.int64),
        np.array(clicks, dtype=np.uint8),
    )
    est = ips_utility(log, weights_fn, rho0)
    return float(np.dot(np.array(probs), est.contributions))


def unbiasedness_suite(n_worlds: int = 50, seed: int = 1234, tol: float = 1e-10) -> SuiteReport:
    """Exact expectation of the IPS objective equals the true utility, per world."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_worlds):
        world = random_tiny_world(rng)
        rho0 = exact_propensity_table(world)
        estimate = expected_ips_utility(world, rho0)
        truth = true_utility(
            world.cand, world.rr, world.rel, world.users, world.K2, world.K,
            world.exam, n_samples=1, rng=rng,
        ).value
        worst = max(worst, abs(estimate - truth))
    passed = worst <= tol
    return SuiteReport(
        "unbiasedness",
        passed,
        [f"worlds: {n_worlds}", f"max |E[estimate] - truth|: {worst:.3e} (tol {tol:.0e})"],
    )


def sampler_suite(
    seed: int = 99, n_samples: int = 200_000, significance: float = 0.001
) -> SuiteReport:
    """Top-K sampler frequencies vs exact enumeration: chi-square and TV distance."""
    scores = np.array([0.9, -0.4, 0.3, 0.0])
    L = 2
    rng = np.random.default_rng(seed)
    draws = sample_topk_rows(np.broadcast_to(scores, (n_samples, len(scores))), L, rng)
    keys = draws[:, 0] * len(scores) + draws[:, 1]
    counts = np.bincount(keys, minlength=len(scores) ** 2)

    expected = np.zeros(len(scores) ** 2)
    for prefix, p in enumerate_prefix_probs(scores, L):
        expected[prefix[0] * len(scores) + prefix[1]] = p * n_samples
    support = expected > 0
    stat = float(np.sum((counts[support] - expected[support]) ** 2 / expected[support]))
    df = int(support.sum()) - 1
    threshold = float(chi2.ppf(1 - significance, df))
    tv = float(0.5 * np.abs(counts[support] - expected[support]).sum() / n_samples)
    stray = int(counts[~support].sum())
    passed = stat < threshold and tv < 0.01 and stray == 0
    return SuiteReport(
        "sampler",
        passed,
        [
            f"outcomes: {df + 1}, samples: {n_samples}",
            f"chi-square: {stat:.2f} < {threshold:.2f} (significance {significance})",
            f"total-variation distance: {tv:.4f} < 0.01",
        ],
    )


def _simulated_tiny_log(world: TinyWorld, n_records: int, rng) -> tuple[ClickLog, PropensityTable]:
    log = simulate_log(world.logging, world.rel, world.users, n_records, world.exam, rng)
    # keep only records with clicks irrelevant? No: estimators handle all records
    rho0 = exact_propensity_table(world)
    return log, rho0


def gradients_suite(
    seed: int = 4321,
    n_worlds: int = 3,
    fd_tol: float = 1e-6,
    mc_total: int = 20_000,
    mc_chunks: int = 20,
) -> SuiteReport:
    """Exact score gradients vs central finite differences, then MC vs exact.

    The Monte-Carlo comparison runs the production batch estimators in chunks
    and checks every score coordinate lies within 3 standard errors.
    """
    rng = np.random.default_rng(seed)
    lines = []
    worst_fd = 0.0
    worst_z = 0.0
    h = 1e-5
    for w in range(n_worlds):
        world = random_tiny_world(rng)
        # regenerate until the world has at least one click in its log
        log, rho0 = _simulated_tiny_log(world, 200, rng)
        while not log.clicks.any():
            log, rho0 = _simulated_tiny_log(world, 200, rng)
        alpha = world.exam.probs(world.K)
        weights = aggregate_click_weights(log, rho0, world.n_items)

        catalog = np.arange(world.n_items)
        for q, wts in weights.items():
            cw = wts / len(log)
            s_c = scores(world.cand, q, catalog)
            s_r = scores(world.rr, q, catalog)
            value, g_c, g_r = exact_ips_grads_from_scores(s_c, s_r, cw, world.K2, world.K, alpha)
            for g_vec, side in ((g_c, 0), (g_r, 1)):
                fd = np.zeros(world.n_items)
                for d in range(world.n_items):
                    bump = np.zeros(world.n_items)
                    bump[d] = h
                    if side == 0:
                        up = exact_ips_value_from_scores(s_c + bump, s_r, cw, world.K2, world.K, alpha)
                        dn = exact_ips_value_from_scores(s_c - bump, s_r, cw, world.K2, world.K, alpha)
                    else:
                        up = exact_ips_value_from_scores(s_c, s_r + bump, cw, world.K2, world.K, alpha)
                        dn = exact_ips_value_from_scores(s_c, s_r - bump, cw, world.K2, world.K, alpha)
                    fd[d] = (up - dn) / (2 * h)
                # error relative to the gradient's magnitude; floored at the FD
                # roundoff scale so identically-zero gradients (e.g. candidate
                # side when K2 equals the catalog) compare cleanly
                scale = max(float(np.abs(fd).max()), float(np.abs(g_vec).max()),
                            1e-4 * max(1.0, abs(value)))
                rel_err = float(np.abs(g_vec - fd).max()) / scale
                worst_fd = max(worst_fd, rel_err)

        # Monte-Carlo batch estimators vs the exact gradients, chunked for SEs
        config = TrainConfig(
            regime="joint", K2=world.K2, K=world.K, n_mc=mc_total // mc_chunks, batch_size=len(log)
        )
        batch = list(log)
        exact = {
            q: exact_ips_grads_from_scores(
                scores(world.cand, q, catalog), scores(world.rr, q, catalog),
                wts / len(log), world.K2, world.K, alpha,
            )
            for q, wts in weights.items()
        }
        for grad_fn, side in ((grad_candidate_batch, 1), (grad_reranker_batch, 2)):
            chunk_grads: dict[int, list[np.ndarray]] = {q: [] for q in weights}
            for _ in range(mc_chunks):
                acc = grad_fn(world.cand, world.rr, batch, rho0, config, rng)
                for q in weights:
                    chunk_grads[q].append(acc.user_rows.get(q, np.zeros(world.n_items)).copy())
            for q in weights:
                stack = np.stack(chunk_grads[q])
                mean = stack.mean(axis=0)
                se = stack.std(axis=0, ddof=1) / np.sqrt(mc_chunks)
                z = np.abs(mean - exact[q][side]) / np.maximum(se, 1e-12)
                worst_z = max(worst_z, float(z.max()))
    passed = worst_fd < fd_tol and worst_z <= 3.0
    lines += [
        f"worlds: {n_worlds}",
        f"max relative error, exact vs finite differences: {worst_fd:.3e} (tol {fd_tol:.0e})",
        f"max |z|, Monte-Carlo ({mc_total} samples) vs exact: {worst_z:.2f} (limit 3)",
    ]
    return SuiteReport("gradients", passed, lines)


SUITES = {
    "unbiasedness": unbiasedness_suite,
    "gradients": gradients_suite,
    "sampler": sampler_suite,
}


def run_suite(name: str) -> SuiteReport:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}, expected one of {sorted(SUITES)}")
    return SUITES[name]()
