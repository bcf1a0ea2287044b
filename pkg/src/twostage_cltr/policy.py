"""Plackett-Luce stochastic ranking policies over matrix-factorization scores.

A policy scores items as dot(user_vec, item_vec) / temperature and samples
top-L rankings by sequential softmax without replacement. Sampling uses the
Gumbel-top-L equivalence (perturb scores with independent Gumbel noise and
take the L largest), which draws from exactly the same distribution as
sequential renormalized softmax draws in O(n + L log n) per sample.

All operations are pure given an explicit `numpy.random.Generator`, so they
are safe to run concurrently on shared read-only models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GuardError

# Factorial blowup guard for exact enumeration backends.
ENUMERATION_LIMIT = 8


@dataclass(frozen=True)
class Ranking:
    """An ordered list of item ids; position k(d) is 1-based, absent items rank inf."""

    items: tuple[int, ...]
    _rank_of: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ranks = {d: k for k, d in enumerate(self.items, start=1)}
        if len(ranks) != len(self.items):
            raise ValueError("ranking contains duplicate item ids")
        object.__setattr__(self, "_rank_of", ranks)

    def __len__(self) -> int:
        return len(self.items)

    def rank_of(self, item: int) -> float:
        return self._rank_of.get(item, math.inf)


@dataclass
class FactorModel:
    """User/item embedding tables; score(u, d) = dot(user_vecs[u], item_vecs[d])."""

    user_vecs: np.ndarray  # (n_users, dim)
    item_vecs: np.ndarray  # (n_items, dim)

    def __post_init__(self):
        self.user_vecs = np.ascontiguousarray(self.user_vecs, dtype=np.float64)
        self.item_vecs = np.ascontiguousarray(self.item_vecs, dtype=np.float64)
        if self.user_vecs.ndim != 2 or self.item_vecs.ndim != 2:
            raise ValueError("embedding tables must be 2-d")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise ValueError("user and item embedding dimensions differ")
        if not (np.isfinite(self.user_vecs).all() and np.isfinite(self.item_vecs).all()):
            raise ValueError("embeddings must be finite")

    @property
    def n_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vecs.shape[0]

    @property
    def dim(self) -> int:
        return self.user_vecs.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_vecs.copy(), self.item_vecs.copy())


@dataclass
class PLPolicy:
    """Plackett-Luce policy: softmax-without-replacement over model scores / temperature."""

    model: FactorModel
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class ScoreGradient:
    """Sparse gradient of a ranking log-probability w.r.t. policy parameters.

    `score_grad[i]` is the partial w.r.t. the raw score of `item_ids[i]`;
    `user_grad` and `item_grads` are the same gradient chained through the
    bilinear score rule onto the touched embedding rows.
    """

    query: int
    user_grad: np.ndarray  # (dim,)
    item_ids: np.ndarray  # (m,) items of the support
    item_grads: np.ndarray  # (m, dim)
    score_grad: np.ndarray  # (m,) partials w.r.t. scores over the support


def _check_ids(ids: np.ndarray, bound: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= bound):
        raise IndexError(f"{what} id out of range [0, {bound})")
    return ids


def scores(policy: PLPolicy, query: int, support: np.ndarray) -> np.ndarray:
    """Temperature-scaled dot-product scores of `support` items for `query`."""
    model = policy.model
    if not 0 <= query < model.n_users:
        raise IndexError(f"query id {query} out of range [0, {model.n_users})")
    support = _check_ids(support, model.n_items, "item")
    return (model.item_vecs[support] @ model.user_vecs[query]) / policy.temperature


# -- score-space primitives (shared by the model-facing API and the trainers) --


def sample_topk_from_scores(s: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of a Gumbel-top-L draw from PL(s), ordered first to last.

    Uses keys s - log(E) with E standard exponential, which equals s + Gumbel
    noise in distribution; the descending order of keys follows the sequential
    softmax-without-replacement law.
    """
    return sample_topk_rows(s[None, :], L, rng)[0]


def sample_topk_rows(score_rows: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    """Batched Gumbel-top-L: one ordered length-L draw per row of `score_rows`.

    Returns an (m, L) array of column positions, first to last.
    """
    m, n = score_rows.shape
    keys = score_rows - np.log(rng.standard_exponential((m, n)))
    if L >= n:
        return np.argsort(-keys, axis=1, kind="stable")
    part = np.argpartition(-keys, L - 1, axis=1)[:, :L]
    order = np.argsort(-np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def log_prob_from_scores(s: np.ndarray, chosen: np.ndarray) -> float:
    """Log PL probability of drawing positions `chosen` (in order) from scores `s`.

    Computed fully in log space; safe for |s| up to ~500.
    """
    n, L = s.shape[0], len(chosen)
    perm = _chosen_first_permutation(n, chosen)
    sp = s[perm]
    suffix_lse = np.logaddexp.accumulate(sp[::-1])[::-1]
    return float(np.sum(sp[:L] - suffix_lse[:L]))


def score_grad_from_scores(s: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Gradient of `log_prob_from_scores(s, chosen)` w.r.t. every entry of `s`.

    At each position j the gradient is +1 on the chosen item and minus the
    softmax over the items still available at j; the softmax sums telescope to
    cumulative weights shared by all later items.
    """
    n, L = s.shape[0], len(chosen)
    perm = _chosen_first_permutation(n, chosen)
    sp = s[perm]
    suffix_lse = np.logaddexp.accumulate(sp[::-1])[::-1]
    log_w = np.logaddexp.accumulate(-suffix_lse[:L])
    grad_perm = np.empty(n)
    grad_perm[:L] = 1.0 - np.exp(sp[:L] + log_w)
    if L < n:
        grad_perm[L:] = -np.exp(sp[L:] + log_w[L - 1])
    grad = np.empty(n)
    grad[perm] = grad_perm
    return grad


def _chosen_first_permutation(n: int, chosen: np.ndarray) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[chosen] = False
    return np.concatenate([np.asarray(chosen, dtype=np.int64), np.flatnonzero(mask)])


def enumerate_prefix_probs(s: np.ndarray, L: int) -> list[tuple[tuple[int, ...], float]]:
    """All ordered L-prefixes of positions 0..n-1 with exact PL probabilities.

    Denominators are recomputed from the remaining set at every node, so no
    cancellation accumulates; the probabilities sum to 1 within ~1e-13.
    """
    n = s.shape[0]
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"enumeration limited to {ENUMERATION_LIMIT} items, got {n}")
    if L > n:
        raise ValueError(f"cannot rank {L} items from a support of {n}")
    e = np.exp(s - s.max())
    out: list[tuple[tuple[int, ...], float]] = []
    mask = np.ones(n, dtype=bool)

    def recurse(prefix: list[int], prob: float):
        if len(prefix) == L:
            out.append((tuple(prefix), prob))
            return
        remaining = np.flatnonzero(mask)
        denom = e[remaining].sum()
        for i in remaining:
            mask[i] = False
            recurse(prefix + [int(i)], prob * (e[i] / denom))
            mask[i] = True

    recurse([], 1.0)
    return out


# -- model-facing operations --


def sample_topk(
    policy: PLPolicy, query: int, support: np.ndarray, L: int, rng: np.random.Generator
) -> Ranking:
    """Draw a length-L ranking over `support` from the PL distribution."""
    support = np.asarray(support, dtype=np.int64)
    if L > support.shape[0]:
        raise ValueError(f"cannot rank {L} items from a support of {support.shape[0]}")
    s = scores(policy, query, support)
    pos = sample_topk_from_scores(s, L, rng)
    return Ranking(tuple(int(d) for d in support[pos]))


def log_prob(policy: PLPolicy, query: int, support: np.ndarray, y: Ranking) -> float:
    """Exact log probability of ranking `y` under the PL policy restricted to `support`."""
    s = scores(policy, query, support)
    chosen = _positions_in_support(np.asarray(support, dtype=np.int64), y)
    return log_prob_from_scores(s, chosen)


def grad_log_prob(policy: PLPolicy, query: int, support: np.ndarray, y: Ranking) -> ScoreGradient:
    """Gradient of log_prob w.r.t. the user row and the support item rows."""
    support = np.asarray(support, dtype=np.int64)
    s = scores(policy, query, support)
    chosen = _positions_in_support(support, y)
    g = score_grad_from_scores(s, chosen)
    model, temp = policy.model, policy.temperature
    user_vec = model.user_vecs[query]
    return ScoreGradient(
        query=query,
        user_grad=(g @ model.item_vecs[support]) / temp,
        item_ids=support,
        item_grads=np.outer(g, user_vec) / temp,
        score_grad=g,
    )


def enumerate_rankings(
    policy: PLPolicy, query: int, support: np.ndarray, L: int
) -> list[tuple[Ranking, float]]:
    """All |support|!/(|support|-L)! rankings with exact probabilities.

    Guarded to |support| <= 8; this is the oracle the samplers and Monte-Carlo
    estimators are validated against.
    """
    support = np.asarray(support, dtype=np.int64)
    s = scores(policy, query, support)
    return [
        (Ranking(tuple(int(support[i]) for i in prefix)), p)
        for prefix, p in enumerate_prefix_probs(s, L)
    ]


def _positions_in_support(support: np.ndarray, y: Ranking) -> np.ndarray:
    index = {int(d): i for i, d in enumerate(support)}
    try:
        return np.array([index[d] for d in y.items], dtype=np.int64)
    except KeyError as err:
        raise ValueError(f"ranking contains item {err.args[0]} outside the support") from None
