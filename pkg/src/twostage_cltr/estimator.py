"""Document weights, counterfactual (IPS) utility, true utility, and NDCG@10.

The central quantity is the two-stage document weight: the expected
examination probability of an item under a candidate-generator /re-ranker
pair. Every estimator here exists in a Monte-Carlo form and, for tiny
catalogs, an exact enumeration form used as its oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clicksim import ClickLog, ExaminationModel, PropensityTable
from .errors import GuardError
from .policy import (
    ENUMERATION_LIMIT,
    PLPolicy,
    enumerate_prefix_probs,
    sample_topk_rows,
    scores,
)


@dataclass
class DocWeightEstimate:
    """Per-item expected examination exposure for one query, with MC standard errors."""

    query: int
    items: np.ndarray  # (m,) item ids with nonzero estimates
    values: np.ndarray  # (m,)
    errs: np.ndarray  # (m,) standard errors (zero for the exact backend)
    n_samples: int

    def weight(self, item: int) -> float:
        pos = np.searchsorted(self.items, item)
        if pos < len(self.items) and self.items[pos] == item:
            return float(self.values[pos])
        return 0.0

    def std_err(self, item: int) -> float:
        pos = np.searchsorted(self.items, item)
        if pos < len(self.items) and self.items[pos] == item:
            return float(self.errs[pos])
        return 0.0

    def weights_for(self, item_arr: np.ndarray) -> np.ndarray:
        out = np.zeros(len(item_arr))
        pos = np.searchsorted(self.items, item_arr)
        pos = np.clip(pos, 0, len(self.items) - 1) if len(self.items) else pos
        if len(self.items):
            hit = self.items[pos] == item_arr
            out[hit] = self.values[pos[hit]]
        return out


@dataclass
class UtilityEstimate:
    """A utility value together with its per-record (or per-user) contributions."""

    value: float
    contributions: np.ndarray


def doc_weights_mc(
    candidate: PLPolicy,
    reranker: PLPolicy,
    query: int,
    K2: int,
    K: int,
    n_samples: int,
    exam: ExaminationModel,
    rng: np.random.Generator,
) -> DocWeightEstimate:
    """Monte-Carlo document weights: average exam.prob(rank) over sampled pipelines.

    Each sample draws a length-K2 candidate list from the full catalog and a
    length-K display list from it; items absent from the display contribute 0.
    """
    if K > K2:
        raise ValueError(f"display length K={K} exceeds candidate length K2={K2}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = candidate.model.n_items
    catalog = np.arange(n)
    s_c = scores(candidate, query, catalog)
    s_r = scores(reranker, query, catalog)

    y_c = sample_topk_rows(np.broadcast_to(s_c, (n_samples, n)), K2, rng)
    pos_r = sample_topk_rows(s_r[y_c], K, rng)
    y_r = np.take_along_axis(y_c, pos_r, axis=1)

    alpha = exam.probs(K)
    flat = y_r.ravel()
    w_sum = np.bincount(flat, weights=np.tile(alpha, n_samples), minlength=n)
    sq_sum = np.bincount(flat, weights=np.tile(alpha**2, n_samples), minlength=n)
    seen = np.bincount(flat, minlength=n) > 0

    items = np.flatnonzero(seen)
    mean = w_sum[items] / n_samples
    var = np.maximum(sq_sum[items] / n_samples - mean**2, 0.0)
    return DocWeightEstimate(query, items, mean, np.sqrt(var / n_samples), n_samples)


def doc_weights_exact(
    candidate: PLPolicy,
    reranker: PLPolicy,
    query: int,
    K2: int,
    K: int,
    exam: ExaminationModel,
) -> DocWeightEstimate:
    """Exact document weights by enumerating every (candidate, display) ranking pair."""
    if K > K2:
        raise ValueError(f"display length K={K} exceeds candidate length K2={K2}")
    n = candidate.model.n_items
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"exact backend limited to {ENUMERATION_LIMIT} items, got {n}")
    catalog = np.arange(n)
    s_c = scores(candidate, query, catalog)
    s_r = scores(reranker, query, catalog)
    alpha = exam.probs(K)

    w = np.zeros(n)
    for y_c, p_c in enumerate_prefix_probs(s_c, K2):
        y_c_arr = np.array(y_c)
        for pos_r, p_r in enumerate_prefix_probs(s_r[y_c_arr], K):
            p = p_c * p_r
            for rank0, pos in enumerate(pos_r):
                w[y_c_arr[pos]] += p * alpha[rank0]
    return DocWeightEstimate(query, catalog, w, np.zeros(n), 0)


def doc_weights_single_mc(
    policy: PLPolicy,
    query: int,
    K: int,
    n_samples: int,
    exam: ExaminationModel,
    rng: np.random.Generator,
) -> DocWeightEstimate:
    """Document weights of a single-stage policy ranking the whole catalog."""
    n = policy.model.n_items
    s = scores(policy, query, np.arange(n))
    y = sample_topk_rows(np.broadcast_to(s, (n_samples, n)), K, rng)
    alpha = exam.probs(K)
    flat = y.ravel()
    w_sum = np.bincount(flat, weights=np.tile(alpha, n_samples), minlength=n)
    sq_sum = np.bincount(flat, weights=np.tile(alpha**2, n_samples), minlength=n)
    seen = np.bincount(flat, minlength=n) > 0
    items = np.flatnonzero(seen)
    mean = w_sum[items] / n_samples
    var = np.maximum(sq_sum[items] / n_samples - mean**2, 0.0)
    return DocWeightEstimate(query, items, mean, np.sqrt(var / n_samples), n_samples)


def doc_weights_single_exact(
    policy: PLPolicy, query: int, K: int, exam: ExaminationModel
) -> DocWeightEstimate:
    """Exact single-stage document weights; oracle for the K2 = n_items reduction."""
    n = policy.model.n_items
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"exact backend limited to {ENUMERATION_LIMIT} items, got {n}")
    s = scores(policy, query, np.arange(n))
    alpha = exam.probs(K)
    w = np.zeros(n)
    for y, p in enumerate_prefix_probs(s, K):
        for rank0, d in enumerate(y):
            w[d] += p * alpha[rank0]
    return DocWeightEstimate(query, np.arange(n), w, np.zeros(n), 0)


def ips_utility(log: ClickLog, weights_fn, rho0: PropensityTable) -> UtilityEstimate:
    """Importance-weighted click utility over a log: mean of per-record sums.

    Each clicked document contributes weight(d) / rho0(q, d); unclicked terms
    are exactly zero so the sum runs over clicks only. `weights_fn` maps a
    query to its DocWeightEstimate and is consulted once per distinct query.
    """
    if len(log) == 0:
        raise ValueError("click log is empty")
    cache: dict[int, DocWeightEstimate] = {}
    contributions = np.zeros(len(log))
    for i in range(len(log)):
        clicked = log.displayed[i][log.clicks[i] == 1]
        if clicked.size == 0:
            continue
        q = int(log.queries[i])
        est = cache.get(q)
        if est is None:
            est = cache[q] = weights_fn(q)
        rho = np.array([rho0.lookup(q, int(d), strict=True) for d in clicked])
        contributions[i] = float(np.sum(est.weights_for(clicked) / rho))
    return UtilityEstimate(float(contributions.mean()), contributions)


def true_utility(
    candidate: PLPolicy,
    reranker: PLPolicy,
    rel,
    users: np.ndarray,
    K2: int,
    K: int,
    exam: ExaminationModel,
    n_samples: int,
    rng: np.random.Generator,
) -> UtilityEstimate:
    """Ground-truth two-stage utility: mean over users of sum_d weight(d) * rel(q, d).

    Uses the exact enumeration backend on tiny catalogs and Monte-Carlo
    weights otherwise.
    """
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError("user set is empty")
    exact = candidate.model.n_items <= ENUMERATION_LIMIT
    contributions = np.zeros(len(users))
    for i, q in enumerate(users):
        q = int(q)
        if exact:
            est = doc_weights_exact(candidate, reranker, q, K2, K, exam)
        else:
            est = doc_weights_mc(candidate, reranker, q, K2, K, n_samples, exam, rng)
        rel_row = rel.rel[q]
        contributions[i] = float(np.sum(est.values * rel_row[est.items]))
    return UtilityEstimate(float(contributions.mean()), contributions)


@dataclass
class NdcgResult:
    value: float
    n_scored: int
    n_skipped: int  # users with no relevant item


def ndcg_at_10_detail(
    candidate: PLPolicy,
    reranker: PLPolicy,
    rel,
    eval_users: np.ndarray,
    K2: int,
    K: int,
    n_samples: int,
    exam_cutoff: int,
    rng: np.random.Generator,
) -> NdcgResult:
    """NDCG over the top `exam_cutoff` displayed slots, averaged over sampled pipelines.

    DCG uses the log2(rank + 1) discount; the ideal DCG fills the top
    min(cutoff, #relevant) slots. Users without any relevant item cannot be
    normalized and are skipped but counted.
    """
    n = candidate.model.n_items
    catalog = np.arange(n)
    depth = min(exam_cutoff, K)
    discounts = 1.0 / np.log2(np.arange(2, depth + 2))
    ideal_cum = np.cumsum(discounts)

    totals, n_scored, n_skipped = [], 0, 0
    for q in np.asarray(eval_users, dtype=np.int64):
        q = int(q)
        rel_row = rel.rel[q]
        n_rel = int(rel_row.sum())
        if n_rel == 0:
            n_skipped += 1
            continue
        s_c = scores(candidate, q, catalog)
        s_r = scores(reranker, q, catalog)
        y_c = sample_topk_rows(np.broadcast_to(s_c, (n_samples, n)), K2, rng)
        pos_r = sample_topk_rows(s_r[y_c], K, rng)
        y_r = np.take_along_axis(y_c, pos_r, axis=1)[:, :depth]
        dcg = (rel_row[y_r] * discounts[None, :]).sum(axis=1)
        idcg = ideal_cum[min(n_rel, depth) - 1]
        totals.append(float(dcg.mean() / idcg))
        n_scored += 1
    value = float(np.mean(totals)) if totals else 0.0
    return NdcgResult(value, n_scored, n_skipped)


def ndcg_at_10(
    candidate: PLPolicy,
    reranker: PLPolicy,
    rel,
    eval_users: np.ndarray,
    K2: int,
    K: int = 10,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean NDCG@10 of the stochastic two-stage pipeline over the eval users."""
    if rng is None:
        rng = np.random.default_rng(0)
    return ndcg_at_10_detail(
        candidate, reranker, rel, eval_users, K2, K, n_samples, exam_cutoff=10, rng=rng
    ).value
