"""Full-study orchestration: worlds, sweep cells, checkpointing, results grid.

A cell is (regime, K2, N); each of its runs rebuilds the world (split, SVD
init, logging policy, click log) from a seed derived by stable hashing, so
results are reproducible bit-for-bit regardless of scheduling or worker
count. The world seed deliberately excludes the regime: the three regimes of
one run index train on the same click log, which is how offline methods are
compared in practice and sharpens the mean-difference comparisons.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .clicksim import ExaminationModel, TwoStageLoggingPolicy, estimate_propensities, simulate_log
from .errors import ConfigError
from .estimator import ndcg_at_10_detail
from .policy import FactorModel, PLPolicy
from .trainer import TrainConfig, history_to_csv, train, train_on_true_labels


@dataclass
class ExperimentConfig:
    """Flat configuration for a sweep; every field maps to a CLI flag."""

    # data source: a ratings file, or a synthesized world when absent
    dataset_path: str | None = None
    world_users: int | None = None  # subsample targets applied to a loaded dataset
    world_items: int | None = None
    synth_users: int = 1380
    synth_items: int = 1000
    # sweep axes
    k2_list: tuple[int, ...] = (500, 1000, 1500)
    n_list: tuple[int, ...] = (100_000, 320_000, 1_000_000)
    regimes: tuple[str, ...] = ("baseline", "independent", "joint")
    n_runs: int = 25
    master_seed: int = 17
    out_dir: str = "results"
    workers: int = 1
    # world construction
    eval_frac: float = 0.10
    logging_frac: float = 0.03
    embedding_dim: int = 50
    svd_source: str = "binarized"  # or "ratings"
    logging_temperature: float = 2.0
    logging_train_steps: int = 250
    logging_n_mc: int = 8
    # training
    K: int = 10
    n_mc: int = 300
    batch_size: int = 32
    n_epochs: int = 20
    learning_rate: float = 0.01
    propensity_floor: float | None = None  # None resolves to 1 / K2
    validation_frac: float = 0.10
    patience: int = 5
    n_mc_eval: int = 64
    control_variate: bool = False
    pretrain_n_epochs: int | None = None
    pretrain_two_stage: bool = False
    # evaluation
    ndcg_samples: int = 50
    eval_temperature: float | None = None  # None: policies keep their trained temperature
    save_history: bool = True

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if not self.k2_list or not self.n_list or not self.regimes:
            raise ConfigError("k2_list, n_list and regimes must be nonempty")
        if self.K > min(self.k2_list):
            raise ConfigError(f"K={self.K} exceeds the smallest K2 {min(self.k2_list)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("k2_list", "n_list", "regimes"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)


def desk_preset(**overrides) -> ExperimentConfig:
    """Laptop-scale sweep: ~1,200 interaction users x 1,000 items, 5 runs per cell.

    Keeps the K2 << catalog << full-scale structure while fitting the whole
    grid in desk time. Relative to the full-scale defaults this preset trains
    with fewer Monte-Carlo samples plus the leave-one-out control variate, a
    higher propensity floor, the production-style (candidate-conditioned)
    re-ranker pre-training for the baseline, and evaluates the learned
    rankings in the deterministic low-temperature limit.
    """
    base = dict(
        synth_users=1380,
        synth_items=1000,
        k2_list=(100, 200),
        n_list=(25_000, 50_000, 100_000),
        n_runs=5,
        n_mc=32,
        batch_size=32,
        n_epochs=8,
        patience=3,
        pretrain_n_epochs=6,
        n_mc_eval=32,
        logging_temperature=1.0,
        logging_train_steps=1000,
        control_variate=True,
        propensity_floor=0.05,
        pretrain_two_stage=True,
        eval_temperature=1e-3,
        ndcg_samples=2,
        out_dir="results_desk",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def paper_preset(dataset_path: str, **overrides) -> ExperimentConfig:
    """The full-scale grid (requires a real ratings file and serious compute)."""
    base = dict(
        dataset_path=dataset_path,
        k2_list=(500, 1000, 1500),
        n_list=(100_000, 320_000, 1_000_000),
        n_runs=25,
        n_mc=300,
        out_dir="results_paper",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# seeding and world construction


def stable_seed(*parts) -> int:
    """Deterministic, platform-independent seed from hashed string parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:16], "big")


@dataclass
class World:
    ratings: ds.RatingsTable
    rel: ds.RelevanceMatrix
    split: ds.UserSplit
    init: FactorModel
    logging: TwoStageLoggingPolicy
    log: object  # ClickLog
    rho0: object  # PropensityTable
    exam: ExaminationModel = field(default_factory=ExaminationModel)


_dataset_cache: dict[tuple, ds.RatingsTable] = {}


def _load_base_ratings(config: ExperimentConfig) -> ds.RatingsTable:
    key = (
        config.dataset_path,
        config.world_users,
        config.world_items,
        config.synth_users,
        config.synth_items,
        config.master_seed,
    )
    cached = _dataset_cache.get(key)
    if cached is not None:
        return cached
    if config.dataset_path is not None:
        ratings = ds.load_ratings(config.dataset_path)
        if config.world_items is not None or config.world_users is not None:
            ratings = ds.subsample_ratings(
                ratings,
                config.world_users or ratings.n_users,
                config.world_items or ratings.n_items,
            )
    else:
        ratings = ds.synthesize_ratings(
            config.synth_users,
            config.synth_items,
            seed=stable_seed(config.master_seed, "dataset"),
        )
    _dataset_cache[key] = ratings
    return ratings


def build_world(config: ExperimentConfig, K2: int, N: int, run_index: int) -> World:
    """Everything upstream of regime training, seeded independently of the regime."""
    exam = ExaminationModel()
    seed = stable_seed(config.master_seed, "world", K2, N, run_index)
    seq = np.random.SeedSequence(seed)
    k_split, k_logging, k_sim = (np.random.default_rng(s) for s in seq.spawn(3))

    ratings = _load_base_ratings(config)
    rel = ds.binarize(ratings)
    split = ds.split_users(
        rel, config.eval_frac, config.logging_frac, seed=int(k_split.integers(2**31))
    )
    if config.svd_source == "ratings":
        dense = np.zeros((ratings.n_users, ratings.n_items))
        dense[ratings.users, ratings.items] = ratings.ratings
        init = ds.svd_factorize(dense, config.embedding_dim, seed)
    else:
        init = ds.svd_init(rel, config.embedding_dim, seed)

    logging_model = train_on_true_labels(
        init.copy(),
        rel,
        split.logging_users,
        config.K,
        exam,
        n_steps=config.logging_train_steps,
        batch_size=16,
        n_mc=config.logging_n_mc,
        learning_rate=config.learning_rate,
        rng=k_logging,
    )
    logging_policy = TwoStageLoggingPolicy(
        candidate=PLPolicy(logging_model, config.logging_temperature),
        reranker=PLPolicy(logging_model, config.logging_temperature),
        K2=K2,
        K=config.K,
    )
    log = simulate_log(logging_policy, rel, split.interaction_users, N, exam, k_sim)
    floor = config.propensity_floor if config.propensity_floor is not None else 1.0 / K2
    rho0 = estimate_propensities(log, exam, floor)
    return World(ratings, rel, split, init, logging_policy, log, rho0, exam)


def _train_config(config: ExperimentConfig, regime: str, K2: int) -> TrainConfig:
    return TrainConfig(
        regime=regime,
        K2=K2,
        K=config.K,
        n_mc=config.n_mc,
        batch_size=config.batch_size,
        n_epochs=config.n_epochs,
        learning_rate=config.learning_rate,
        propensity_floor=config.propensity_floor,
        validation_frac=config.validation_frac,
        patience=config.patience,
        n_mc_eval=config.n_mc_eval,
        control_variate=config.control_variate,
        pretrain_n_epochs=config.pretrain_n_epochs,
        pretrain_two_stage=config.pretrain_two_stage,
    )


def run_cell(
    config: ExperimentConfig,
    regime: str,
    K2: int,
    N: int,
    run_index: int,
    world: World | None = None,
    history_sink: list | None = None,
) -> float:
    """One full pipeline run; returns the eval-population NDCG@10.

    Training randomness is seeded by (master seed, regime, K2, N, run);
    the world and the evaluation stream exclude the regime so that regimes
    are compared on identical logs and identical evaluation draws.
    """
    try:
        if world is None:
            world = build_world(config, K2, N, run_index)
        train_rng = np.random.default_rng(
            stable_seed(config.master_seed, regime, K2, N, run_index)
        )
        tc = _train_config(config, regime, K2)
        cand, rr, history = train(
            regime, world.log, world.rho0, (world.init, world.init), tc, train_rng,
            logging_candidate=world.logging.candidate,
        )
        if history_sink is not None:
            history_sink.extend(history)
        eval_rng = np.random.default_rng(
            stable_seed(config.master_seed, "eval", K2, N, run_index)
        )
        if config.eval_temperature is not None:
            cand = PLPolicy(cand.model, config.eval_temperature)
            rr = PLPolicy(rr.model, config.eval_temperature)
        result = ndcg_at_10_detail(
            cand,
            rr,
            world.rel,
            world.split.eval_users,
            K2,
            config.K,
            config.ndcg_samples,
            exam_cutoff=world.exam.cutoff,
            rng=eval_rng,
        )
        return result.value
    except Exception as err:
        raise RuntimeError(
            f"cell regime={regime}, K2={K2}, N={N}, run={run_index} failed: {err}"
        ) from err


# ---------------------------------------------------------------------------
# grid execution with per-run checkpoints


@dataclass
class ResultsGrid:
    """(regime, K2, N) -> {run_index: ndcg10}; summaries recomputed on demand."""

    cells: dict[tuple[str, int, int], dict[int, float]] = field(default_factory=dict)

    def add(self, regime: str, K2: int, N: int, run_index: int, value: float) -> None:
        self.cells.setdefault((regime, K2, N), {})[run_index] = value

    def values(self, regime: str, K2: int, N: int) -> np.ndarray:
        runs = self.cells.get((regime, K2, N), {})
        return np.array([runs[k] for k in sorted(runs)])

    def mean(self, regime: str, K2: int, N: int) -> float:
        vals = self.values(regime, K2, N)
        return float(vals.mean()) if vals.size else float("nan")

    def se(self, regime: str, K2: int, N: int) -> float:
        vals = self.values(regime, K2, N)
        if vals.size < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(vals.size))


def _checkpoint_path(out_dir: str, master_seed: int, regime: str, K2: int, N: int, run: int) -> str:
    key = hashlib.sha256(f"{master_seed}|{regime}|{K2}|{N}|{run}".encode()).hexdigest()[:20]
    return os.path.join(out_dir, "runs", f"{key}.json")


def _write_json_atomic(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def _run_group(config: ExperimentConfig, K2: int, N: int, run: int, regimes: tuple[str, ...]):
    """Worker: build the shared world once, then run each pending regime."""
    try:
        world = build_world(config, K2, N, run)
    except Exception as err:
        return [(regime, None, f"world construction failed: {err}") for regime in regimes]
    results = []
    for regime in regimes:
        history: list = []
        try:
            value = run_cell(config, regime, K2, N, run, world=world, history_sink=history)
        except Exception as err:  # recorded, the sweep continues
            results.append((regime, None, str(err)))
            continue
        payload = {"regime": regime, "K2": K2, "N": N, "run": run, "ndcg10": value}
        _write_json_atomic(
            _checkpoint_path(config.out_dir, config.master_seed, regime, K2, N, run), payload
        )
        if config.save_history:
            hist_dir = os.path.join(config.out_dir, "history")
            os.makedirs(hist_dir, exist_ok=True)
            with open(
                os.path.join(hist_dir, f"{regime}_K2-{K2}_N-{N}_run-{run}.csv"),
                "w",
                encoding="utf-8",
            ) as fh:
                fh.write(history_to_csv(history))
        results.append((regime, value, None))
    return results


def run_grid(
    config: ExperimentConfig, cells: list[tuple[str, int, int]] | None = None
) -> ResultsGrid:
    """Run every (regime, K2, N, run) task, resuming from per-run checkpoints.

    Worlds are shared across regimes of the same (K2, N, run). Failures are
    recorded in failures.json and do not stop the remaining cells. Writes
    grid.csv and table.txt into the output directory.
    """
    if cells is None:
        cells = [(r, k2, n) for r in config.regimes for k2 in config.k2_list for n in config.n_list]
    grid = ResultsGrid()
    pending: dict[tuple[int, int, int], list[str]] = {}
    for regime, K2, N in cells:
        for run in range(config.n_runs):
            path = _checkpoint_path(config.out_dir, config.master_seed, regime, K2, N, run)
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as fh:
                    grid.add(regime, K2, N, run, float(json.load(fh)["ndcg10"]))
            else:
                pending.setdefault((K2, N, run), []).append(regime)

    failures = []
    groups = sorted(pending.items())
    if config.workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_run_group, config, K2, N, run, tuple(regimes))
                for (K2, N, run), regimes in groups
            ]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_group(config, K2, N, run, tuple(regimes)) for (K2, N, run), regimes in groups]

    for ((K2, N, run), _), results in zip(groups, outcomes):
        for regime, value, err in results:
            if err is not None:
                failures.append({"regime": regime, "K2": K2, "N": N, "run": run, "error": err})
            else:
                grid.add(regime, K2, N, run, value)

    os.makedirs(config.out_dir, exist_ok=True)
    if failures:
        with open(os.path.join(config.out_dir, "failures.json"), "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2)
    with open(os.path.join(config.out_dir, "grid.csv"), "w", encoding="utf-8") as fh:
        fh.write(grid_to_csv(grid))
    with open(os.path.join(config.out_dir, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_table(grid))
    return grid


def load_grid(out_dir: str) -> ResultsGrid:
    """Rebuild a grid from a previously written grid.csv."""
    grid = ResultsGrid()
    path = os.path.join(out_dir, "grid.csv")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "regime,K2,N,run,ndcg10":
            raise ConfigError(f"unexpected grid.csv header in {path}: {header.strip()!r}")
        for line in fh:
            regime, k2, n, run, val = line.strip().split(",")
            grid.add(regime, int(k2), int(n), int(run), float(val))
    return grid


def grid_to_csv(grid: ResultsGrid) -> str:
    """Canonically ordered CSV; float values round-trip exactly."""
    lines = ["regime,K2,N,run,ndcg10"]
    for regime, K2, N in sorted(grid.cells):
        runs = grid.cells[(regime, K2, N)]
        for run in sorted(runs):
            lines.append(f"{regime},{K2},{N},{run},{runs[run]!r}")
    return "\n".join(lines) + "\n"


def render_table(grid: ResultsGrid) -> str:
    """Text grid: regime rows, K2 column groups, N sub-columns, best per column bold."""
    regimes = sorted({c[0] for c in grid.cells})
    k2s = sorted({c[1] for c in grid.cells})
    ns = sorted({c[2] for c in grid.cells})
    if not grid.cells:
        return "Method\n"
    col_w = 18
    name_w = max([len(r) for r in regimes] + [8]) + 2

    header1 = " " * name_w
    header2 = "Method".ljust(name_w)
    for k2 in k2s:
        header1 += f"K2={k2}".ljust(col_w * len(ns))
        for n in ns:
            header2 += f"N={n}".ljust(col_w)
    lines = [header1.rstrip(), header2.rstrip()]

    best: dict[tuple[int, int], float] = {}
    for k2 in k2s:
        for n in ns:
            means = [grid.mean(r, k2, n) for r in regimes if (r, k2, n) in grid.cells]
            if means:
                best[(k2, n)] = max(means)
    for regime in regimes:
        row = regime.ljust(name_w)
        for k2 in k2s:
            for n in ns:
                if (regime, k2, n) not in grid.cells:
                    row += "-".ljust(col_w)
                    continue
                mean, se = grid.mean(regime, k2, n), grid.se(regime, k2, n)
                cell = f"{mean:.3f} ({se:.3f})"
                if abs(mean - best[(k2, n)]) < 5e-4:
                    cell = f"**{cell}**"
                row += cell.ljust(col_w)
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"
