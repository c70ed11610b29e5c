"""Information-sharing Bayesian reduced-rank regression."""

__version__ = "0.1.0"

from .model import (
    BLM_LIKE,
    GROUP_SPARSE,
    SHARING,
    SHRINKAGE,
    VARIANTS,
    Dataset,
    DimensionError,
    GroupPartition,
    Hyperparameters,
    ModelState,
    ModelVariant,
    NumericalError,
    TruncationAdaptation,
    gamma_row_prior_cov,
    implied_covariance,
    init_state,
    log_joint_density,
    predict_mean,
    residual_correlation,
)
from .gibbs import (
    ChainSchedule,
    SampleStore,
    adapt_ranks,
    posterior_predict,
    run_chain,
    update_noise_block,
    update_regression_block,
)


