"""Cluster-level marketing budget allocation.

Learn hidden representations with a multi-task (optionally monotone)
network, cluster them, solve a variance-averse budget program over the
clusters, distill the serving path into one classifier, and evaluate any
policy with an off-policy expected-outcome estimator against individual-
level baselines.
"""

from .allocator import (
    SolverConfig,
    StrategyLibrary,
    build_strategy_library,
    lookup_strategy,
    score_matrix,
    solve_exact_ip,
    solve_stochastic,
)
from .baselines import (
    DflConfig,
    SLearner,
    TwoModel,
    heuristic_allocate,
    heuristic_allocate_proportions,
    lagrangian_allocate,
    slearner_predict,
    train_dfl,
    train_slearner,
    train_two_model,
    two_model_predict,
)
from .cluster import (
    ClusterModel,
    ClusterStats,
    assign,
    cluster_stats,
    kmeans_fit,
)
from .data import (
    Assignment,
    Dataset,
    DatasetKind,
    Sample,
    TreatmentSet,
    load_dataset,
    save_dataset,
)
from .errors import (
    ClusterAllocError,
    ConfigError,
    DatasetError,
    InfeasibleBudgetError,
    TrainingDivergedError,
)
from .evaluation import (
    EomEstimate,
    Policy,
    compare,
    constant_policy,
    eom,
    eom_curve,
    hrc_cluster_policy,
    hrc_policy,
)
from .nn import (
    GradientSet,
    Mlp,
    Standardizer,
    TrainConfig,
    grad_check,
    mlp_apply,
    mlp_grad,
    mlp_init,
    train,
)
from .repnet import (
    DistilledClassifier,
    MonotonicHead,
    RepNet,
    build_repnet,
    classify,
    distill,
    embed,
    predict_propensity,
    predict_revenue,
    predict_revenue_matrix,
    train_repnet,
)
from .synthgen import (
    GenConfig,
    GroundTruth,
    default_config,
    generate_obs,
    generate_rct,
    oracle_policy_value,
    table_calibrated_config,
    true_constant_arm_value,
    true_group_policy_value,
    true_policy_value,
)

__version__ = "0.1.0"
