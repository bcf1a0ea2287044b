"""REINFORCE training of the candidate generator and re-ranker.

Gradients of the importance-weighted click utility are estimated with the
log-derivative trick: each logged click contributes
exam.prob(rank under a sampled pipeline) / rho0 times the gradient of the
sampled ranking's log-probability. The candidate stage uses the paired
(candidate list, display list) sample, which is unbiased because the
candidate's log-gradient does not depend on the display draw.

Three regimes are provided: `baseline` (re-ranker pre-trained on the click
data and frozen, candidate trained through the pipeline), `independent`
(both stages trained single-stage and composed), and `joint` (per-minibatch
alternating updates of the two stages).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .clicksim import ClickLog, ClickRecord, ExaminationModel, PropensityTable
from .errors import ConfigError, GuardError
from .estimator import doc_weights_mc, doc_weights_single_mc
from .policy import (
    ENUMERATION_LIMIT,
    FactorModel,
    PLPolicy,
    enumerate_prefix_probs,
    sample_topk_rows,
    score_grad_from_scores,
)

REGIMES = ("baseline", "independent", "joint")


# ---------------------------------------------------------------------------
# gradient containers and the optimizer


@dataclass
class GradAccumulator:
    """Sparse gradient: touched embedding rows keyed by (table, row index)."""

    user_rows: dict[int, np.ndarray] = field(default_factory=dict)
    item_rows: dict[int, np.ndarray] = field(default_factory=dict)

    def add_user(self, user: int, vec: np.ndarray) -> None:
        cur = self.user_rows.get(user)
        if cur is None:
            self.user_rows[user] = vec.copy()
        else:
            cur += vec

    def add_item_rows(self, ids: np.ndarray, mat: np.ndarray) -> None:
        rows = self.item_rows
        for j, d in enumerate(ids):
            d = int(d)
            cur = rows.get(d)
            if cur is None:
                rows[d] = mat[j].copy()
            else:
                cur += mat[j]

    def scale(self, c: float) -> None:
        for vec in self.user_rows.values():
            vec *= c
        for vec in self.item_rows.values():
            vec *= c

    def stacked(self, table: str) -> tuple[np.ndarray, np.ndarray]:
        """(row ids, stacked gradient matrix) for "user" or "item"."""
        rows = self.user_rows if table == "user" else self.item_rows
        if not rows:
            return np.empty(0, dtype=np.int64), np.empty((0, 0))
        ids = np.fromiter(rows.keys(), dtype=np.int64, count=len(rows))
        return ids, np.stack([rows[int(i)] for i in ids])

    def max_abs(self) -> float:
        vals = [np.abs(v).max() for v in self.user_rows.values()]
        vals += [np.abs(v).max() for v in self.item_rows.values()]
        return max(vals, default=0.0)

    @staticmethod
    def merge(accs: list["GradAccumulator"]) -> "GradAccumulator":
        """Pairwise tree reduction, so the sum order is independent of chunking."""
        if not accs:
            return GradAccumulator()
        layer = list(accs)
        while len(layer) > 1:
            nxt = []
            for i in range(0, len(layer) - 1, 2):
                a, b = layer[i], layer[i + 1]
                for u, vec in b.user_rows.items():
                    a.add_user(u, vec)
                for d, vec in b.item_rows.items():
                    cur = a.item_rows.get(d)
                    if cur is None:
                        a.item_rows[d] = vec.copy()
                    else:
                        cur += vec
                nxt.append(a)
            if len(layer) % 2:
                nxt.append(layer[-1])
            layer = nxt
        return layer[0]


@dataclass
class OptimizerState:
    """Adaptive-moment (Adam) state matching a FactorModel's shape."""

    m_user: np.ndarray
    v_user: np.ndarray
    m_item: np.ndarray
    v_item: np.ndarray
    step: int = 0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: FactorModel, learning_rate: float = 0.01) -> "OptimizerState":
        return cls(
            m_user=np.zeros_like(model.user_vecs),
            v_user=np.zeros_like(model.user_vecs),
            m_item=np.zeros_like(model.item_vecs),
            v_item=np.zeros_like(model.item_vecs),
            learning_rate=learning_rate,
        )


def optimizer_step(
    state: OptimizerState, model: FactorModel, grads: GradAccumulator
) -> tuple[FactorModel, OptimizerState]:
    """One ascent step on the touched rows; untouched moments are left as-is."""
    state.step += 1
    t = state.step
    for table, params, m_tab, v_tab in (
        ("user", model.user_vecs, state.m_user, state.v_user),
        ("item", model.item_vecs, state.m_item, state.v_item),
    ):
        ids, g = grads.stacked(table)
        if ids.size == 0:
            continue
        if not np.isfinite(g).all():
            bad = ids[~np.isfinite(g).all(axis=1)]
            raise FloatingPointError(f"non-finite gradient in {table} rows {bad[:5].tolist()}")
        m_tab[ids] = state.beta1 * m_tab[ids] + (1 - state.beta1) * g
        v_tab[ids] = state.beta2 * v_tab[ids] + (1 - state.beta2) * g * g
        m_hat = m_tab[ids] / (1 - state.beta1**t)
        v_hat = v_tab[ids] / (1 - state.beta2**t)
        params[ids] += state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state


@dataclass
class TrainConfig:
    """Hyperparameters shared by all regimes."""

    regime: str = "joint"
    K2: int = 500
    K: int = 10
    n_mc: int = 300
    batch_size: int = 32
    n_epochs: int = 20
    learning_rate: float = 0.01
    propensity_floor: float | None = None  # None resolves to 1 / K2
    eval_cadence: int = 1
    validation_frac: float = 0.10
    patience: int = 5
    n_mc_eval: int = 64
    utility_train_sample: int = 512
    control_variate: bool = False
    pretrain_n_epochs: int | None = None
    # baseline re-ranker pre-training: plain single-stage over the catalog, or
    # conditioned on candidate lists drawn from the logging pipeline
    pretrain_two_stage: bool = False
    exam: ExaminationModel = field(default_factory=ExaminationModel)

    def __post_init__(self):
        if self.n_mc < 1:
            raise ConfigError(f"n_mc must be >= 1, got {self.n_mc}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.validation_frac < 1:
            raise ConfigError(f"validation_frac must lie in [0, 1), got {self.validation_frac}")
        if self.K > self.K2:
            raise ConfigError(f"need K <= K2, got K={self.K}, K2={self.K2}")

    def floor(self) -> float:
        return self.propensity_floor if self.propensity_floor is not None else 1.0 / self.K2


# ---------------------------------------------------------------------------
# Monte-Carlo score-space kernels


def _catalog_scores(model: FactorModel, temperature: float, query: int) -> np.ndarray:
    return (model.item_vecs @ model.user_vecs[query]) / temperature


def _click_weights(y_r: np.ndarray, clicked: np.ndarray, inv_rho: np.ndarray, alpha: np.ndarray):
    """Per-sample importance weights: sum over clicked d of exam(rank of d) / rho0."""
    hits = y_r[None, :, :] == clicked[:, None, None]
    contrib = (hits * alpha[None, None, :]).sum(axis=2)
    return inv_rho @ contrib


def _loo_adjust(w: np.ndarray) -> np.ndarray:
    """Leave-one-out control variate: subtract the mean of the other samples."""
    n = len(w)
    if n < 2:
        return w
    return (n * w - w.sum()) / (n - 1)


def _weighted_pl_grad_shared(s: np.ndarray, chosen: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_m w[m] * grad_s log PL(chosen[m] | s), all rows sharing the score vector s.

    Works in exp space with a telescoping denominator; rows whose remaining
    probability mass cancels below float precision fall back to the log-space
    path.
    """
    n = s.shape[0]
    e = np.exp(s - s.max())
    total = e.sum()
    e_ch = e[chosen]
    denom = (total - np.cumsum(e_ch, axis=1)) + e_ch
    bad = denom.min(axis=1) <= total * 1e-12
    good = ~bad

    grad = np.zeros(n)
    if good.any():
        cum_w = np.cumsum(1.0 / denom[good], axis=1)
        last = cum_w[:, -1]
        w_good = w[good]
        grad -= e * float(w_good @ last)
        vals = w_good[:, None] * (1.0 + e_ch[good] * (last[:, None] - cum_w))
        grad += np.bincount(chosen[good].ravel(), weights=vals.ravel(), minlength=n)
    for i in np.flatnonzero(bad):
        grad += w[i] * score_grad_from_scores(s, chosen[i])
    return grad


def _weighted_pl_grad_rows(s_rows: np.ndarray, chosen: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-row supports: returns V with V[m, j] = w[m] * dlogPL/ds_rows[m, j]."""
    e = np.exp(s_rows - s_rows.max(axis=1, keepdims=True))
    total = e.sum(axis=1)
    e_ch = np.take_along_axis(e, chosen, axis=1)
    denom = (total[:, None] - np.cumsum(e_ch, axis=1)) + e_ch
    bad = denom.min(axis=1) <= total * 1e-12

    cum_w = np.cumsum(1.0 / np.where(denom > 0, denom, 1.0), axis=1)
    last = cum_w[:, -1]
    V = -e * last[:, None]
    adj = 1.0 + e_ch * (last[:, None] - cum_w)
    np.put_along_axis(V, chosen, np.take_along_axis(V, chosen, axis=1) + adj, axis=1)
    V *= w[:, None]
    for i in np.flatnonzero(bad):
        V[i] = w[i] * score_grad_from_scores(s_rows[i], chosen[i])
    return V


def _two_stage_record_grads(
    s_c: np.ndarray,
    s_r: np.ndarray,
    K2: int,
    K: int,
    n_mc: int,
    clicked: np.ndarray,
    inv_rho: np.ndarray,
    alpha: np.ndarray,
    rng: np.random.Generator,
    want: str,
    control_variate: bool = False,
) -> np.ndarray | None:
    """Catalog-score gradient for one record, averaged over n_mc pipeline samples.

    `want` selects the candidate ("cand") or re-ranker ("rr") side; the other
    stage is sampled but not differentiated.
    """
    n = s_c.shape[0]
    y_c = sample_topk_rows(np.broadcast_to(s_c, (n_mc, n)), K2, rng)
    pos_r = sample_topk_rows(s_r[y_c], K, rng)
    y_r = np.take_along_axis(y_c, pos_r, axis=1)
    w = _click_weights(y_r, clicked, inv_rho, alpha)
    if not w.any():
        return None
    if control_variate:
        w = _loo_adjust(w)
    w = w / n_mc
    if want == "cand":
        return _weighted_pl_grad_shared(s_c, y_c, w)
    V = _weighted_pl_grad_rows(s_r[y_c], pos_r, w)
    return np.bincount(y_c.ravel(), weights=V.ravel(), minlength=n)


def _single_stage_record_grad(
    s: np.ndarray,
    K: int,
    n_mc: int,
    weight_fn,
    rng: np.random.Generator,
    control_variate: bool = False,
) -> np.ndarray | None:
    """Catalog-score gradient for one record under a single ranking policy."""
    n = s.shape[0]
    y = sample_topk_rows(np.broadcast_to(s, (n_mc, n)), K, rng)
    w = weight_fn(y)
    if not w.any():
        return None
    if control_variate:
        w = _loo_adjust(w)
    return _weighted_pl_grad_shared(s, y, w / n_mc)


# ---------------------------------------------------------------------------
# batch gradient estimators (importance-weighted click objective)


def _chain_into_accumulator(
    acc: GradAccumulator,
    model: FactorModel,
    temperature: float,
    queries: list[int],
    score_grads: list[np.ndarray],
) -> None:
    """Map catalog-score gradients onto embedding rows via the bilinear score rule."""
    if not score_grads:
        return
    G = np.stack(score_grads)  # (b, n)
    U = model.user_vecs[queries] / temperature  # (b, dim)
    for q, g in zip(queries, G):
        acc.add_user(q, (g @ model.item_vecs) / temperature)
    item_grad = G.T @ U  # (n, dim)
    touched = np.flatnonzero(np.abs(item_grad).sum(axis=1) > 0)
    acc.add_item_rows(touched, item_grad[touched])


def grad_candidate_batch(
    candidate: PLPolicy,
    reranker: PLPolicy,
    batch: list[ClickRecord],
    rho0: PropensityTable,
    config: TrainConfig,
    rng: np.random.Generator,
) -> GradAccumulator:
    """Candidate-side gradient of the importance-weighted utility over a minibatch.

    For every record, n_mc (candidate list, display list) pairs are sampled;
    each pair contributes its clicked exposure weight times the candidate
    log-probability gradient, averaged over samples and records.
    """
    return _two_stage_batch(candidate, reranker, batch, rho0, config, rng, want="cand")


def grad_reranker_batch(
    candidate: PLPolicy,
    reranker: PLPolicy,
    batch: list[ClickRecord],
    rho0: PropensityTable,
    config: TrainConfig,
    rng: np.random.Generator,
) -> GradAccumulator:
    """Re-ranker-side gradient; the log-probability is conditioned on the sampled candidates."""
    return _two_stage_batch(candidate, reranker, batch, rho0, config, rng, want="rr")


def _two_stage_batch(candidate, reranker, batch, rho0, config, rng, want) -> GradAccumulator:
    if not batch:
        raise ValueError("batch is empty")
    alpha = config.exam.probs(config.K)
    acc = GradAccumulator()
    queries, grads = [], []
    for rec in batch:
        clicked = rec.displayed[rec.clicks == 1]
        if clicked.size == 0:
            continue
        q = int(rec.query)
        inv_rho = 1.0 / rho0.lookup_many(q, clicked, strict=True)
        s_c = _catalog_scores(candidate.model, candidate.temperature, q)
        s_r = _catalog_scores(reranker.model, reranker.temperature, q)
        g = _two_stage_record_grads(
            s_c, s_r, config.K2, config.K, config.n_mc, clicked, inv_rho, alpha, rng,
            want, config.control_variate,
        )
        if g is not None:
            queries.append(q)
            grads.append(g)
    policy = candidate if want == "cand" else reranker
    _chain_into_accumulator(acc, policy.model, policy.temperature, queries, grads)
    acc.scale(1.0 / len(batch))
    return acc


def _single_stage_batch(
    policy: PLPolicy, batch_prepared, config: TrainConfig, rng, rank_length: int | None = None
) -> GradAccumulator:
    """Single-policy gradient: each record's ranking is sampled by the policy itself.

    `rank_length` is the sampled list length; clicked exposure still comes from
    the examination cutoff, so a candidate generator trains on its own
    K2-long lists while a re-ranker trains on display-length lists.
    """
    L = rank_length if rank_length is not None else config.K
    alpha = config.exam.probs(L)
    acc = GradAccumulator()
    queries, grads = [], []
    for q, clicked, inv_rho in batch_prepared:
        if clicked.size == 0:
            continue
        s = _catalog_scores(policy.model, policy.temperature, q)
        g = _single_stage_record_grad(
            s, L, config.n_mc,
            lambda y: _click_weights(y, clicked, inv_rho, alpha),
            rng, config.control_variate,
        )
        if g is not None:
            queries.append(q)
            grads.append(g)
    _chain_into_accumulator(acc, policy.model, policy.temperature, queries, grads)
    acc.scale(1.0 / len(batch_prepared))
    return acc


# ---------------------------------------------------------------------------
# training loops


def prepare_records(log: ClickLog, rho0: PropensityTable) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Resolve every record's clicked items and inverse propensities once."""
    out = []
    for i in range(len(log)):
        q = int(log.queries[i])
        clicked = log.displayed[i][log.clicks[i] == 1]
        inv_rho = (
            1.0 / rho0.lookup_many(q, clicked, strict=True) if clicked.size else np.empty(0)
        )
        out.append((q, clicked, inv_rho))
    return out


def single_stage_utility_value(
    policy: PLPolicy, prepared, K: int, exam: ExaminationModel, n_samples: int, rng
) -> float:
    """Importance-weighted utility of one policy ranking the whole catalog."""
    if not prepared:
        return 0.0
    weight_maps: dict[int, np.ndarray] = {}
    total = 0.0
    for q, clicked, inv_rho in prepared:
        if clicked.size == 0:
            continue
        if q not in weight_maps:
            est = doc_weights_single_mc(policy, q, K, n_samples, exam, rng)
            wmap = np.zeros(policy.model.n_items)
            wmap[est.items] = est.values
            weight_maps[q] = wmap
        total += float(np.sum(weight_maps[q][clicked] * inv_rho))
    return total / len(prepared)


def two_stage_utility_value(
    candidate: PLPolicy, reranker: PLPolicy, prepared, K2: int, K: int,
    exam: ExaminationModel, n_samples: int, rng,
) -> float:
    """Importance-weighted utility of the composed pipeline over prepared records."""
    if not prepared:
        return 0.0
    weight_maps: dict[int, np.ndarray] = {}
    total = 0.0
    for q, clicked, inv_rho in prepared:
        if clicked.size == 0:
            continue
        if q not in weight_maps:
            est = doc_weights_mc(candidate, reranker, q, K2, K, n_samples, exam, rng)
            wmap = np.zeros(candidate.model.n_items)
            wmap[est.items] = est.values
            weight_maps[q] = wmap
        total += float(np.sum(weight_maps[q][clicked] * inv_rho))
    return total / len(prepared)


def _split_validation(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(frac * n))
    return perm[n_val:], perm[:n_val]


@dataclass
class _EpochStats:
    phase: str
    epoch: int
    regime: str
    u_train: float
    u_val: float
    seconds: float
    n_cand_updates: int = 0
    n_rr_updates: int = 0
    ndcg10: float | None = None


def history_to_csv(history: list[_EpochStats]) -> str:
    lines = ["epoch,regime,u_train,u_validation,ndcg10,seconds"]
    for h in history:
        ndcg = "" if h.ndcg10 is None else repr(h.ndcg10)
        lines.append(f"{h.epoch},{h.regime},{h.u_train!r},{h.u_val!r},{ndcg},{h.seconds:.3f}")
    return "\n".join(lines) + "\n"


def _train_single_stage_loop(
    model: FactorModel, prepared_train, prepared_val, config: TrainConfig, rng, phase: str,
    n_epochs: int, rank_length: int | None = None,
) -> tuple[FactorModel, list[_EpochStats]]:
    policy = PLPolicy(model, temperature=1.0)
    opt = OptimizerState.for_model(model, config.learning_rate)
    train_probe = prepared_train[: config.utility_train_sample]
    best_val, best_snapshot, stale = -np.inf, model.copy(), 0
    history: list[_EpochStats] = []
    n_updates = 0
    for epoch in range(1, n_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(prepared_train))
        for lo in range(0, len(order), config.batch_size):
            chunk = [prepared_train[i] for i in order[lo : lo + config.batch_size]]
            acc = _single_stage_batch(policy, chunk, config, rng, rank_length)
            optimizer_step(opt, model, acc)
            n_updates += 1
        u_train = single_stage_utility_value(
            policy, train_probe, config.K, config.exam, config.n_mc_eval, rng
        )
        u_val = (
            single_stage_utility_value(
                policy, prepared_val, config.K, config.exam, config.n_mc_eval, rng
            )
            if prepared_val
            else u_train
        )
        history.append(
            _EpochStats(phase, epoch, phase, u_train, u_val, time.perf_counter() - t0)
        )
        if u_val > best_val:
            best_val, best_snapshot, stale = u_val, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.user_vecs[:] = best_snapshot.user_vecs
    model.item_vecs[:] = best_snapshot.item_vecs
    return model, history


def _train_rr_under_candidate_loop(
    rr_model: FactorModel,
    frozen_cand: PLPolicy,
    prepared_train,
    prepared_val,
    config: TrainConfig,
    rng,
    phase: str,
    n_epochs: int,
) -> tuple[FactorModel, list["_EpochStats"]]:
    """Re-ranker training conditioned on candidate lists from a frozen policy.

    This is the production-style pre-training: the re-ranker only ever sees
    candidate sets drawn by the (logging) candidate stage.
    """
    rr = PLPolicy(rr_model, temperature=1.0)
    opt = OptimizerState.for_model(rr_model, config.learning_rate)
    alpha = config.exam.probs(config.K)
    train_probe = prepared_train[: config.utility_train_sample]
    best_val, best_snapshot, stale = -np.inf, rr_model.copy(), 0
    history: list[_EpochStats] = []
    for epoch in range(1, n_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(prepared_train))
        for lo in range(0, len(order), config.batch_size):
            chunk = [prepared_train[i] for i in order[lo : lo + config.batch_size]]
            acc = GradAccumulator()
            queries, grads = [], []
            for q, clicked, inv_rho in chunk:
                if clicked.size == 0:
                    continue
                s_c = _catalog_scores(frozen_cand.model, frozen_cand.temperature, q)
                s_r = _catalog_scores(rr_model, rr.temperature, q)
                g = _two_stage_record_grads(
                    s_c, s_r, config.K2, config.K, config.n_mc, clicked, inv_rho,
                    alpha, rng, "rr", config.control_variate,
                )
                if g is not None:
                    queries.append(q)
                    grads.append(g)
            _chain_into_accumulator(acc, rr_model, rr.temperature, queries, grads)
            acc.scale(1.0 / len(chunk))
            optimizer_step(opt, rr_model, acc)
        u_train = two_stage_utility_value(
            frozen_cand, rr, train_probe, config.K2, config.K, config.exam, config.n_mc_eval, rng
        )
        u_val = (
            two_stage_utility_value(
                frozen_cand, rr, prepared_val, config.K2, config.K, config.exam,
                config.n_mc_eval, rng,
            )
            if prepared_val
            else u_train
        )
        history.append(_EpochStats(phase, epoch, phase, u_train, u_val, time.perf_counter() - t0))
        if u_val > best_val:
            best_val, best_snapshot, stale = u_val, rr_model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    rr_model.user_vecs[:] = best_snapshot.user_vecs
    rr_model.item_vecs[:] = best_snapshot.item_vecs
    return rr_model, history


def pretrain_reranker(
    log: ClickLog,
    rho0: PropensityTable,
    init: FactorModel,
    config: TrainConfig,
    rng: np.random.Generator,
) -> PLPolicy:
    """Single-stage importance-weighted training over the full catalog; returned frozen."""
    if len(log) == 0:
        raise ValueError("click log is empty")
    prepared = prepare_records(log, rho0)
    train_idx, val_idx = _split_validation(len(prepared), config.validation_frac, rng)
    model = init.copy()
    n_epochs = config.pretrain_n_epochs or config.n_epochs
    model, _ = _train_single_stage_loop(
        model,
        [prepared[i] for i in train_idx],
        [prepared[i] for i in val_idx],
        config, rng, "pretrain_rr", n_epochs,
    )
    return PLPolicy(model, temperature=1.0)


def train(
    regime: str,
    log: ClickLog,
    rho0: PropensityTable,
    init: tuple[FactorModel, FactorModel],
    config: TrainConfig,
    rng: np.random.Generator,
    logging_candidate: PLPolicy | None = None,
) -> tuple[PLPolicy, PLPolicy, list[_EpochStats]]:
    """Train a (candidate, re-ranker) pair under one of the three regimes.

    baseline     pre-train the re-ranker on the click data, freeze it, then
                 train the candidate through the two-stage objective;
    independent  train both stages single-stage and compose them;
    joint        alternate candidate/re-ranker updates per minibatch.

    With config.pretrain_two_stage the baseline re-ranker pre-trains
    conditioned on candidate lists from `logging_candidate` (the production
    pipeline that generated the log) instead of the plain single-stage
    objective.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    if len(log) == 0:
        raise ValueError("click log is empty")
    cand_model, rr_model = init[0].copy(), init[1].copy()
    prepared = prepare_records(log, rho0)
    train_idx, val_idx = _split_validation(len(prepared), config.validation_frac, rng)
    prepared_train = [prepared[i] for i in train_idx]
    prepared_val = [prepared[i] for i in val_idx]
    history: list[_EpochStats] = []

    if regime == "independent":
        rr_model, h_rr = _train_single_stage_loop(
            rr_model, prepared_train, prepared_val, config, rng, "independent_rr",
            config.n_epochs,
        )
        history.extend(h_rr)
        # the candidate trains on its own production output: K2-long rankings
        cand_model, h_c = _train_single_stage_loop(
            cand_model, prepared_train, prepared_val, config, rng, "independent_cand",
            config.n_epochs, rank_length=config.K2,
        )
        history.extend(h_c)
        return PLPolicy(cand_model), PLPolicy(rr_model), history

    if regime == "baseline":
        n_pre = config.pretrain_n_epochs or config.n_epochs
        if config.pretrain_two_stage:
            if logging_candidate is None:
                raise ConfigError("pretrain_two_stage requires the logging candidate policy")
            rr_model, h_rr = _train_rr_under_candidate_loop(
                rr_model, logging_candidate, prepared_train, prepared_val, config, rng,
                "pretrain_rr", n_pre,
            )
        else:
            rr_model, h_rr = _train_single_stage_loop(
                rr_model, prepared_train, prepared_val, config, rng, "pretrain_rr", n_pre,
            )
        history.extend(h_rr)
        update_rr = False
    else:  # joint
        update_rr = True

    cand, rr = PLPolicy(cand_model), PLPolicy(rr_model)
    opt_c = OptimizerState.for_model(cand_model, config.learning_rate)
    opt_r = OptimizerState.for_model(rr_model, config.learning_rate)
    alpha = config.exam.probs(config.K)
    train_probe = prepared_train[: config.utility_train_sample]
    best_val = -np.inf
    best_snapshot = (cand_model.copy(), rr_model.copy())
    stale = 0
    global_batch = 0
    for epoch in range(1, config.n_epochs + 1):
        t0 = time.perf_counter()
        n_c_updates = n_r_updates = 0
        order = rng.permutation(len(prepared_train))
        for lo in range(0, len(order), config.batch_size):
            chunk = [prepared_train[i] for i in order[lo : lo + config.batch_size]]
            which = "cand" if (not update_rr or global_batch % 2 == 0) else "rr"
            acc = GradAccumulator()
            queries, grads = [], []
            for q, clicked, inv_rho in chunk:
                if clicked.size == 0:
                    continue
                s_c = _catalog_scores(cand_model, cand.temperature, q)
                s_r = _catalog_scores(rr_model, rr.temperature, q)
                g = _two_stage_record_grads(
                    s_c, s_r, config.K2, config.K, config.n_mc, clicked, inv_rho,
                    alpha, rng, which, config.control_variate,
                )
                if g is not None:
                    queries.append(q)
                    grads.append(g)
            if which == "cand":
                _chain_into_accumulator(acc, cand_model, cand.temperature, queries, grads)
                acc.scale(1.0 / len(chunk))
                optimizer_step(opt_c, cand_model, acc)
                n_c_updates += 1
            else:
                _chain_into_accumulator(acc, rr_model, rr.temperature, queries, grads)
                acc.scale(1.0 / len(chunk))
                optimizer_step(opt_r, rr_model, acc)
                n_r_updates += 1
            global_batch += 1
        u_train = two_stage_utility_value(
            cand, rr, train_probe, config.K2, config.K, config.exam, config.n_mc_eval, rng
        )
        u_val = (
            two_stage_utility_value(
                cand, rr, prepared_val, config.K2, config.K, config.exam, config.n_mc_eval, rng
            )
            if prepared_val
            else u_train
        )
        history.append(
            _EpochStats(regime, epoch, regime, u_train, u_val, time.perf_counter() - t0,
                        n_c_updates, n_r_updates)
        )
        if u_val > best_val:
            best_val, stale = u_val, 0
            best_snapshot = (cand_model.copy(), rr_model.copy())
        else:
            stale += 1
            if stale >= config.patience:
                break
    cand_model.user_vecs[:] = best_snapshot[0].user_vecs
    cand_model.item_vecs[:] = best_snapshot[0].item_vecs
    rr_model.user_vecs[:] = best_snapshot[1].user_vecs
    rr_model.item_vecs[:] = best_snapshot[1].item_vecs
    return cand, rr, history


def train_on_true_labels(
    model: FactorModel,
    rel,
    users: np.ndarray,
    K: int,
    exam: ExaminationModel,
    n_steps: int,
    batch_size: int,
    n_mc: int,
    learning_rate: float,
    rng: np.random.Generator,
) -> FactorModel:
    """REINFORCE on the true-relevance utility; used to build the logging policy.

    Fixed step budget, no early stopping. Updates the given model in place.
    """
    users = np.asarray(users, dtype=np.int64)
    policy = PLPolicy(model, temperature=1.0)
    opt = OptimizerState.for_model(model, learning_rate)
    alpha = exam.probs(K)
    for _ in range(n_steps):
        batch = users[rng.integers(0, len(users), size=min(batch_size, len(users)))]
        acc = GradAccumulator()
        queries, grads = [], []
        for q in batch:
            q = int(q)
            rel_row = rel.rel[q]
            s = _catalog_scores(model, 1.0, q)
            g = _single_stage_record_grad(
                s, K, n_mc, lambda y: (rel_row[y] * alpha[None, :]).sum(axis=1), rng
            )
            if g is not None:
                queries.append(q)
                grads.append(g)
        _chain_into_accumulator(acc, model, policy.temperature, queries, grads)
        acc.scale(1.0 / len(batch))
        optimizer_step(opt, model, acc)
    return model


# ---------------------------------------------------------------------------
# exact small-instance oracles (value and gradients by full enumeration)


def exact_ips_value_from_scores(
    s_c: np.ndarray, s_r: np.ndarray, click_weight: np.ndarray, K2: int, K: int,
    alpha: np.ndarray,
) -> float:
    """Exact importance-weighted utility for one query given aggregated click weights.

    click_weight[d] is the summed c(d) / rho0(d) over the query's records;
    the value enumerates every (candidate, display) pair.
    """
    n = s_c.shape[0]
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"exact backend limited to {ENUMERATION_LIMIT} items, got {n}")
    value = 0.0
    for y_c, p_c in enumerate_prefix_probs(s_c, K2):
        y_c_arr = np.array(y_c)
        for pos_r, p_r in enumerate_prefix_probs(s_r[y_c_arr], K):
            f = float(np.sum(click_weight[y_c_arr[list(pos_r)]] * alpha[: len(pos_r)]))
            value += p_c * p_r * f
    return value


def exact_ips_grads_from_scores(
    s_c: np.ndarray, s_r: np.ndarray, click_weight: np.ndarray, K2: int, K: int,
    alpha: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """(value, d/ds_c, d/ds_r) of the exact importance-weighted utility.

    The candidate gradient weighs each candidate list's log-probability
    gradient by its expected display payoff; the re-ranker gradient conditions
    on the candidate set.
    """
    n = s_c.shape[0]
    if n > ENUMERATION_LIMIT:
        raise GuardError(f"exact backend limited to {ENUMERATION_LIMIT} items, got {n}")
    value = 0.0
    g_c = np.zeros(n)
    g_r = np.zeros(n)
    for y_c, p_c in enumerate_prefix_probs(s_c, K2):
        y_c_arr = np.array(y_c)
        s_r_local = s_r[y_c_arr]
        glog_c = score_grad_from_scores(s_c, y_c_arr)
        inner = 0.0
        for pos_r, p_r in enumerate_prefix_probs(s_r_local, K):
            pos_arr = np.array(pos_r)
            f = float(np.sum(click_weight[y_c_arr[pos_arr]] * alpha[: len(pos_arr)]))
            inner += p_r * f
            g_local = score_grad_from_scores(s_r_local, pos_arr)
            g_r[y_c_arr] += p_c * p_r * f * g_local
        value += p_c * inner
        g_c += p_c * inner * glog_c
    return value, g_c, g_r


def aggregate_click_weights(
    log: ClickLog, rho0: PropensityTable, n_items: int
) -> dict[int, np.ndarray]:
    """Per-query arrays W with W[d] = sum over the query's records of c(d) / rho0(d)."""
    out: dict[int, np.ndarray] = {}
    for i in range(len(log)):
        q = int(log.queries[i])
        clicked = log.displayed[i][log.clicks[i] == 1]
        if clicked.size == 0:
            continue
        w = out.setdefault(q, np.zeros(n_items))
        for d in clicked:
            w[int(d)] += 1.0 / rho0.lookup(q, int(d), strict=True)
    return out


def exact_ips_utility_and_grads(
    candidate: PLPolicy,
    reranker: PLPolicy,
    log: ClickLog,
    rho0: PropensityTable,
    K2: int,
    K: int,
    exam: ExaminationModel,
) -> tuple[float, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Exact utility of a log plus per-query score gradients; tiny catalogs only."""
    n = candidate.model.n_items
    alpha = exam.probs(K)
    weights = aggregate_click_weights(log, rho0, n)
    value = 0.0
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for q, w in weights.items():
        s_c = _catalog_scores(candidate.model, candidate.temperature, q)
        s_r = _catalog_scores(reranker.model, reranker.temperature, q)
        v, g_c, g_r = exact_ips_grads_from_scores(s_c, s_r, w / len(log), K2, K, alpha)
        value += v
        grads[q] = (g_c, g_r)
    return value, grads
