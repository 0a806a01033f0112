"""Finite-armed contextual bandits on HMM-generated contexts: exact and
estimated belief filtering, spectral parameter estimation, staged and
per-round LinUCB policies, and pseudo-regret evaluation."""

__version__ = "0.1.0"

from .hmm import (
    Belief,
    HmmDiagnostics,
    HmmParams,
    Trajectory,
    check_forgetting,
    forgetting_rate,
    sample_trajectory,
    stationary_distribution,
    true_belief_filter,
    validate,
)
from .spectral import (
    EstimatedHmm,
    MomentAccumulator,
    MomentSet,
    SpectralWorkspace,
    accumulate_moments,
    align,
    postprocess,
    spectral_estimate,
)
from .beliefs import (
    BeliefErrorBudget,
    FilterState,
    OnlineBeliefEstimator,
    belief_error_trace,
    dump_belief_trace,
    filter_step,
    u_belief,
)
from .environment import (
    BanditEnvironment,
    NoiseModel,
    RewardSpec,
    RoundRecord,
    TransferFunction,
    check_reward_bounds,
    draw_reward,
    mean_reward,
    sample_theta,
)
from .policies import (
    BonusConfig,
    BoxAPolicy,
    BoxBPolicy,
    OraclePolicy,
    RandomPolicy,
    RidgeState,
    StagePlan,
    bonus_boxA,
    bonus_boxB,
    oracle_act,
    ridge_update,
    tensor_feature,
)
from .evaluation import (
    RateFit,
    RegretLedger,
    check_determinant_trace,
    check_elliptic_potential,
    check_matrix_determinant_lemma,
    check_staged_elliptic_potential,
    fit_rate,
    record_round,
    run_lemma_trials,
)
from .config import ExperimentConfig, load_config, parse_config
from .runner import estimation_curves, run_experiment, simulate_cell

__all__ = [name for name in dir() if not name.startswith("_")]
