"""Biased click simulation on a two-stage logging pipeline, and propensity estimates.

Clicks follow the examination hypothesis: P(click at rank k) = prob(k) * rel,
with prob(k) = 1/k up to a display cutoff and 0 beyond it. The logging
pipeline samples a candidate list of length K2 from the full catalog, then a
displayed list of length K from the candidates. Propensities are per-(query,
item) frequency estimates of examination exposure under that pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataIntegrityError, GuardError
from .policy import (
    ENUMERATION_LIMIT,
    PLPolicy,
    enumerate_prefix_probs,
    sample_topk_rows,
    scores,
)

_SIM_CHUNK = 4096  # fixed so the rng draw order never depends on configuration


@dataclass(frozen=True)
class ExaminationModel:
    """Position-based examination: prob(k) = 1/k for k <= cutoff, else 0."""

    cutoff: int = 10

    def prob(self, rank: float) -> float:
        if 1 <= rank <= self.cutoff:
            return 1.0 / rank
        return 0.0

    def probs(self, length: int) -> np.ndarray:
        """Vector of examination probabilities for ranks 1..length."""
        ranks = np.arange(1, length + 1, dtype=np.float64)
        return np.where(ranks <= self.cutoff, 1.0 / ranks, 0.0)


@dataclass
class ClickRecord:
    query: int
    displayed: np.ndarray  # (K,) item ids, display order
    clicks: np.ndarray  # (K,) 0/1


@dataclass
class ClickLog:
    """Columnar click log; iterate to get per-record views."""

    queries: np.ndarray  # (N,)
    displayed: np.ndarray  # (N, K)
    clicks: np.ndarray  # (N, K) uint8

    def __len__(self) -> int:
        return len(self.queries)

    def record(self, i: int) -> ClickRecord:
        return ClickRecord(int(self.queries[i]), self.displayed[i], self.clicks[i])

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def save_jsonl(self, path: str, user_ids=None, item_ids=None) -> None:
        """One JSON object per record: q (original user id), y (item ids), c (0/1)."""
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                q = int(self.queries[i])
                y = self.displayed[i]
                fh.write(
                    json.dumps(
                        {
                            "q": int(user_ids[q]) if user_ids is not None else q,
                            "y": [int(item_ids[d]) if item_ids is not None else int(d) for d in y],
                            "c": [int(c) for c in self.clicks[i]],
                        }
                    )
                    + "\n"
                )

    @staticmethod
    def load_jsonl(path: str, user_ids=None, item_ids=None) -> "ClickLog":
        queries, displayed, clicks = [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                q, y = obj["q"], obj["y"]
                if user_ids is not None:
                    q = int(np.searchsorted(user_ids, q))
                if item_ids is not None:
                    y = np.searchsorted(item_ids, y)
                queries.append(q)
                displayed.append(y)
                clicks.append(obj["c"])
        return ClickLog(
            np.asarray(queries, dtype=np.int64),
            np.asarray(displayed, dtype=np.int64),
            np.asarray(clicks, dtype=np.uint8),
        )


@dataclass
class TwoStageLoggingPolicy:
    """The production pipeline that generated the logs: candidate stage then re-ranker."""

    candidate: PLPolicy
    reranker: PLPolicy
    K2: int
    K: int

    def __post_init__(self):
        n_items = self.candidate.model.n_items
        if not self.K <= self.K2 <= n_items:
            raise ValueError(f"need K <= K2 <= n_items, got K={self.K}, K2={self.K2}, n={n_items}")


@dataclass
class PropensityTable:
    """Per-(query, item) frequency estimates of logging exposure, floored at `floor`."""

    floor: float
    items_by_query: dict[int, np.ndarray] = field(default_factory=dict)  # sorted item ids
    rho_by_query: dict[int, np.ndarray] = field(default_factory=dict)
    impressions: dict[int, int] = field(default_factory=dict)

    def lookup(self, query: int, item: int, strict: bool = False) -> float:
        """Stored estimate, or the floor for never-displayed pairs.

        With strict=True a missing pair raises instead: clicked pairs are
        always displayed, so a miss means the table belongs to another log.
        """
        items = self.items_by_query.get(query)
        if items is not None:
            pos = np.searchsorted(items, item)
            if pos < len(items) and items[pos] == item:
                return float(self.rho_by_query[query][pos])
        if strict:
            raise DataIntegrityError(f"no logged exposure for query {query}, item {item}")
        return self.floor

    def lookup_many(self, query: int, item_arr: np.ndarray, strict: bool = False) -> np.ndarray:
        out = np.empty(len(item_arr), dtype=np.float64)
        for i, d in enumerate(item_arr):
            out[i] = self.lookup(query, int(d), strict=strict)
        return out

    def to_json(self) -> dict[str, float]:
        """Flat map keyed "q:d" for persistence."""
        out = {}
        for q, items in self.items_by_query.items():
            rho = self.rho_by_query[q]
            for d, r in zip(items, rho):
                out[f"{q}:{d}"] = float(r)
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def sample_two_stage(
    logging: TwoStageLoggingPolicy, query: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One (candidate list, displayed list) draw of the pipeline, as item-id arrays."""
    cand = logging.candidate
    n = cand.model.n_items
    s_c = scores(cand, query, np.arange(n))
    y_c = sample_topk_rows(s_c[None, :], logging.K2, rng)[0]
    s_r = scores(logging.reranker, query, y_c)
    y_r = y_c[sample_topk_rows(s_r[None, :], logging.K, rng)[0]]
    return y_c, y_r


def simulate_log(
    logging: TwoStageLoggingPolicy,
    rel,
    users: np.ndarray,
    N: int,
    exam: ExaminationModel,
    rng: np.random.Generator,
) -> ClickLog:
    """Simulate N logged interactions: uniform queries, pipeline rankings, biased clicks.

    Deterministic given the generator state; records are produced in index
    order with a fixed internal chunk size, so output never depends on the
    environment.
    """
    users = np.asarray(users, dtype=np.int64)
    if N < 1:
        raise ValueError(f"need at least one record, got N={N}")
    if users.size == 0:
        raise ValueError("user set is empty")

    K2, K = logging.K2, logging.K
    queries = users[rng.integers(0, len(users), size=N)]

    # score rows per distinct user, computed once
    uniq, q_inv = np.unique(queries, return_inverse=True)
    cand, rr = logging.candidate, logging.reranker
    s_c_rows = (cand.model.user_vecs[uniq] @ cand.model.item_vecs.T) / cand.temperature
    s_r_rows = (rr.model.user_vecs[uniq] @ rr.model.item_vecs.T) / rr.temperature

    alpha = exam.probs(K)
    displayed = np.empty((N, K), dtype=np.int64)
    clicks = np.empty((N, K), dtype=np.uint8)
    for lo in range(0, N, _SIM_CHUNK):
        hi = min(lo + _SIM_CHUNK, N)
        rows = q_inv[lo:hi]
        m = hi - lo

        y_c = sample_topk_rows(s_c_rows[rows], K2, rng)
        pos_r = sample_topk_rows(np.take_along_axis(s_r_rows[rows], y_c, axis=1), K, rng)
        y_r = np.take_along_axis(y_c, pos_r, axis=1)

        rel_disp = rel.rel[queries[lo:hi, None], y_r]
        clicks[lo:hi] = rng.random((m, K)) < alpha[None, :] * rel_disp
        displayed[lo:hi] = y_r
    return ClickLog(queries, displayed, clicks)


def estimate_propensities(log: ClickLog, exam: ExaminationModel, floor: float) -> PropensityTable:
    """Frequency propensities: mean examination exposure per (query, item), floored.

    An item's exposure in one record is prob(rank) if displayed there and 0
    otherwise; the mean runs over all of the query's records. Pairs never
    displayed for a query are not stored and fall back to the floor.
    """
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    if len(log) == 0:
        raise ValueError("click log is empty")

    K = log.displayed.shape[1]
    alpha = exam.probs(K)
    table = PropensityTable(floor=floor)
    order = np.argsort(log.queries, kind="stable")
    boundaries = np.flatnonzero(np.diff(log.queries[order])) + 1
    for group in np.split(order, boundaries):
        q = int(log.queries[group[0]])
        shown = log.displayed[group].ravel()
        n_records = len(group)
        width = int(shown.max()) + 1
        exposure = np.bincount(shown, weights=np.tile(alpha, n_records), minlength=width)
        seen = np.bincount(shown, minlength=width) > 0
        items = np.flatnonzero(seen)
        table.items_by_query[q] = items
        table.rho_by_query[q] = np.maximum(exposure[items] / n_records, floor)
        table.impressions[q] = n_records
    return table


def exact_propensities(
    logging: TwoStageLoggingPolicy, query: int, exam: ExaminationModel = ExaminationModel()
) -> dict[int, float]:
    """Exact examination exposure per item under the pipeline, by full enumeration.

    Small-instance oracle: sums P(y_c) P(y_r | y_c) prob(rank) over every
    candidate/displayed ranking pair. Guarded to tiny catalogs.
    """
    n = logging.candidate.model.n_items
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"exact propensities limited to {ENUMERATION_LIMIT} items, got {n}")
    catalog = np.arange(n)
    s_c = scores(logging.candidate, query, catalog)
    s_r_full = scores(logging.reranker, query, catalog)
    alpha = exam.probs(logging.K)

    rho: dict[int, float] = {d: 0.0 for d in range(n)}
    for y_c, p_c in enumerate_prefix_probs(s_c, logging.K2):
        y_c_arr = np.array(y_c)
        for y_r_pos, p_r in enumerate_prefix_probs(s_r_full[y_c_arr], logging.K):
            p = p_c * p_r
            for rank0, pos in enumerate(y_r_pos):
                rho[int(y_c_arr[pos])] += p * alpha[rank0]
    return rho
