"""Ratings ingestion, relevance binarization, user splits, and SVD embeddings.

The input format is MovieLens-style `ratings.dat`: one `UserID::MovieID::
Rating::Timestamp` record per line. Ids are remapped to dense 0-based indices
on load; the maps back to the original ids are kept on the table. All outputs
are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .policy import FactorModel

# Above this size the dense SVD gets slow; switch to sparse iterative SVD.
_DENSE_SVD_LIMIT = 2500


@dataclass
class RatingsTable:
    """Columnar (user, item, rating, timestamp) records with dense ids.

    `user_ids[u]` / `item_ids[d]` recover the original id of dense index u/d.
    """

    users: np.ndarray  # (n,) dense user indices
    items: np.ndarray  # (n,) dense item indices
    ratings: np.ndarray  # (n,) ints in 1..5
    timestamps: np.ndarray  # (n,) seconds
    user_ids: np.ndarray  # (n_users,) original ids, sorted
    item_ids: np.ndarray  # (n_items,) original ids, sorted

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.ratings)


@dataclass
class RelevanceMatrix:
    """Binary ground-truth relevance per (user, item); unrated pairs are 0."""

    rel: np.ndarray  # (n_users, n_items) uint8

    @property
    def n_users(self) -> int:
        return self.rel.shape[0]

    @property
    def n_items(self) -> int:
        return self.rel.shape[1]

    def rel_of(self, user: int, item: int) -> int:
        return int(self.rel[user, item])

    def row(self, user: int) -> np.ndarray:
        return self.rel[user]

    def n_relevant(self) -> np.ndarray:
        return self.rel.sum(axis=1, dtype=np.int64)


@dataclass
class UserSplit:
    """Disjoint user populations: logging-policy training / click simulation / evaluation."""

    logging_users: np.ndarray
    interaction_users: np.ndarray
    eval_users: np.ndarray


def load_ratings(path: str) -> RatingsTable:
    """Parse a `::`-separated ratings file into a dense-id RatingsTable.

    Raises ParseError (naming the line) on malformed lines or out-of-range
    ratings, DataError on duplicate (user, item) pairs.
    """
    users, items, ratings, stamps = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                u, d, r, t = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer field in {line!r}") from None
            if not 1 <= r <= 5:
                raise ParseError(f"line {lineno}: rating {r} outside 1..5")
            users.append(u)
            items.append(d)
            ratings.append(r)
            stamps.append(t)
    return _build_table(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(ratings, dtype=np.int64),
        np.array(stamps, dtype=np.int64),
    )


def _build_table(users_orig, items_orig, ratings, stamps) -> RatingsTable:
    user_ids, users = np.unique(users_orig, return_inverse=True)
    item_ids, items = np.unique(items_orig, return_inverse=True)
    if len(ratings):
        pair_key = users * len(item_ids) + items
        if len(np.unique(pair_key)) != len(pair_key):
            dup = _first_duplicate(pair_key)
            u, d = divmod(int(dup), len(item_ids))
            raise DataError(f"duplicate rating for user {user_ids[u]}, item {item_ids[d]}")
    return RatingsTable(users, items, ratings, stamps, user_ids, item_ids)


def _first_duplicate(keys: np.ndarray) -> int:
    uniq, counts = np.unique(keys, return_counts=True)
    return int(uniq[counts > 1][0])


def binarize(ratings: RatingsTable) -> RelevanceMatrix:
    """Relevance 1 exactly for ratings above 3, implicit 0 everywhere else."""
    rel = np.zeros((ratings.n_users, ratings.n_items), dtype=np.uint8)
    pos = ratings.ratings > 3
    rel[ratings.users[pos], ratings.items[pos]] = 1
    return RelevanceMatrix(rel)


def split_users(
    matrix: RelevanceMatrix, eval_frac: float, logging_frac: float, seed: int
) -> UserSplit:
    """Partition users into logging / interaction / eval sets, sizes rounded fractions."""
    for name, frac in (("eval_frac", eval_frac), ("logging_frac", logging_frac)):
        if not 0 < frac < 1:
            raise ConfigError(f"{name} must lie in (0, 1), got {frac}")
    if eval_frac + logging_frac >= 1:
        raise ConfigError(f"eval_frac + logging_frac = {eval_frac + logging_frac} must be < 1")
    n = matrix.n_users
    n_eval = round(eval_frac * n)
    n_logging = round(logging_frac * n)
    perm = np.random.default_rng(seed).permutation(n)
    return UserSplit(
        logging_users=np.sort(perm[n_eval : n_eval + n_logging]),
        interaction_users=np.sort(perm[n_eval + n_logging :]),
        eval_users=np.sort(perm[:n_eval]),
    )


def split_to_json(split: UserSplit, ratings: RatingsTable) -> dict:
    """Split as arrays of original user ids, ready for JSON persistence."""
    return {
        "logging_users": ratings.user_ids[split.logging_users].tolist(),
        "interaction_users": ratings.user_ids[split.interaction_users].tolist(),
        "eval_users": ratings.user_ids[split.eval_users].tolist(),
        "user_ids": ratings.user_ids.tolist(),
        "item_ids": ratings.item_ids.tolist(),
    }


def save_split(split: UserSplit, ratings: RatingsTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split_to_json(split, ratings), fh)


def svd_init(matrix: RelevanceMatrix, dim: int, seed: int) -> FactorModel:
    """Rank-`dim` factorization of the binary relevance matrix.

    Returns U diag(sqrt(s)), V diag(sqrt(s)) so that user_vecs @ item_vecs.T
    is the best rank-`dim` reconstruction. Small matrices use a dense SVD;
    large ones an iterative sparse SVD with a seeded start vector.
    """
    return svd_factorize(matrix.rel.astype(np.float64), dim, seed)


def svd_factorize(dense: np.ndarray, dim: int, seed: int) -> FactorModel:
    """SVD-based rank-`dim` factor model of an arbitrary dense matrix."""
    n_users, n_items = dense.shape
    if dim > min(n_users, n_items):
        raise ConfigError(f"dim {dim} exceeds min(n_users, n_items) = {min(n_users, n_items)}")
    if min(n_users, n_items) <= _DENSE_SVD_LIMIT:
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        u, s, vt = u[:, :dim], s[:dim], vt[:dim]
    else:
        from scipy.sparse import csr_matrix
        from scipy.sparse.linalg import svds

        rng = np.random.default_rng(seed)
        u, s, vt = svds(csr_matrix(dense), k=dim, v0=rng.standard_normal(min(dense.shape)))
        order = np.argsort(-s)
        u, s, vt = u[:, order], s[order], vt[order]
    # canonical sign: largest-|entry| item component positive per factor
    for j in range(dim):
        pivot = np.argmax(np.abs(vt[j]))
        if vt[j, pivot] < 0:
            vt[j] = -vt[j]
            u[:, j] = -u[:, j]
    root = np.sqrt(s)
    return FactorModel(user_vecs=u * root, item_vecs=vt.T * root)


def subsample_ratings(
    ratings: RatingsTable, n_users: int, n_items: int, min_user_ratings: int = 5
) -> RatingsTable:
    """Restrict to the `n_items` most-rated items and the `n_users` most active users.

    Ties break on id; the result is re-indexed densely but keeps the original
    ids in its maps, so persisted artifacts stay traceable.
    """
    item_counts = np.bincount(ratings.items, minlength=ratings.n_items)
    keep_items = np.sort(np.argsort(-item_counts, kind="stable")[:n_items])
    item_mask = np.zeros(ratings.n_items, dtype=bool)
    item_mask[keep_items] = True
    row_mask = item_mask[ratings.items]

    user_counts = np.bincount(ratings.users[row_mask], minlength=ratings.n_users)
    qualified = np.flatnonzero(user_counts >= min_user_ratings)
    if len(qualified) < n_users:
        raise DataError(
            f"only {len(qualified)} users have >= {min_user_ratings} ratings on the kept items"
        )
    order = qualified[np.argsort(-user_counts[qualified], kind="stable")]
    keep_users = np.sort(order[:n_users])
    user_mask = np.zeros(ratings.n_users, dtype=bool)
    user_mask[keep_users] = True
    row_mask &= user_mask[ratings.users]

    return _build_table(
        ratings.user_ids[ratings.users[row_mask]],
        ratings.item_ids[ratings.items[row_mask]],
        ratings.ratings[row_mask],
        ratings.timestamps[row_mask],
    )


def synthesize_ratings(
    n_users: int,
    n_items: int,
    seed: int,
    avg_ratings_per_user: float = 80.0,
    latent_dim: int = 12,
) -> RatingsTable:
    """Generate a MovieLens-shaped ratings table from a low-rank latent model.

    Users rate a popularity- and taste-skewed subset of items; rating levels
    follow the latent affinity plus noise, discretized so roughly 57% of
    ratings land above 3. Used when no real ratings file is available.
    """
    rng = np.random.default_rng(seed)
    user_lat = rng.standard_normal((n_users, latent_dim)) / np.sqrt(latent_dim)
    item_lat = rng.standard_normal((n_items, latent_dim))
    affinity = user_lat @ item_lat.T
    popularity = 1.2 * rng.standard_normal(n_items)

    counts = rng.lognormal(mean=np.log(avg_ratings_per_user), sigma=0.45, size=n_users)
    counts = np.clip(counts.astype(np.int64), 12, n_items // 2)

    users, items = [], []
    for u in range(n_users):
        # selection favors popular items and items the user likes
        keys = popularity + 0.8 * affinity[u] + rng.gumbel(size=n_items)
        top = np.argpartition(-keys, counts[u] - 1)[: counts[u]]
        users.append(np.full(counts[u], u, dtype=np.int64))
        items.append(np.sort(top))
    users = np.concatenate(users)
    items = np.concatenate(items)

    noisy = affinity[users, items] + 0.6 * rng.standard_normal(len(users))
    # rating level proportions, cumulative: 1..5
    quantiles = np.quantile(noisy, [0.06, 0.17, 0.43, 0.78])
    ratings = np.digitize(noisy, quantiles) + 1
    stamps = np.arange(len(users), dtype=np.int64) + 978_000_000
    return _build_table(users + 1, items + 1, ratings.astype(np.int64), stamps)


def write_ratings_file(ratings: RatingsTable, path: str) -> None:
    """Serialize a table back to the `::`-separated format with original ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, d, r, t in zip(ratings.users, ratings.items, ratings.ratings, ratings.timestamps):
            fh.write(f"{ratings.user_ids[u]}::{ratings.item_ids[d]}::{r}::{t}\n")
