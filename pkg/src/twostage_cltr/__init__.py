"""Two-stage counterfactual learning to rank from simulated biased click logs.

A candidate generator proposes K2 items from the catalog, a re-ranker orders
the displayed top-K, and both are trained from position-biased clicks with an
inverse-propensity-weighted objective. The package covers the full study:
data ingestion, Plackett-Luce policies, click simulation, counterfactual and
ground-truth estimators, three training regimes, and the sweep runner that
produces the method-comparison grid.
"""

from .clicksim import (
    ClickLog,
    ClickRecord,
    ExaminationModel,
    PropensityTable,
    TwoStageLoggingPolicy,
    estimate_propensities,
    exact_propensities,
    simulate_log,
)
from .dataset import (
    RatingsTable,
    RelevanceMatrix,
    UserSplit,
    binarize,
    load_ratings,
    split_users,
    svd_init,
    synthesize_ratings,
)
from .errors import ConfigError, DataError, DataIntegrityError, GuardError, ParseError
from .estimator import (
    DocWeightEstimate,
    UtilityEstimate,
    doc_weights_exact,
    doc_weights_mc,
    ips_utility,
    ndcg_at_10,
    true_utility,
)
from .experiment import ExperimentConfig, ResultsGrid, desk_preset, paper_preset, render_table, run_cell, run_grid
from .policy import (
    FactorModel,
    PLPolicy,
    Ranking,
    ScoreGradient,
    enumerate_rankings,
    grad_log_prob,
    log_prob,
    sample_topk,
    scores,
)
from .trainer import (
    GradAccumulator,
    OptimizerState,
    TrainConfig,
    grad_candidate_batch,
    grad_reranker_batch,
    optimizer_step,
    pretrain_reranker,
    train,
)

__version__ = "0.1.0"
