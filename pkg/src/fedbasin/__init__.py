"""fedbasin: a desk-scale federated learning laboratory.

Small dense networks, heterogeneous data partitioning, federated model
averaging with several server-side aggregators, iterative moving averaging
of global models, an empirical expected-loss decomposition, and 1D/2D loss
landscape scans.
"""

__version__ = "0.1.0"

from .datasets import (
    Dataset,
    FeatureSkewSpec,
    Partition,
    apply_feature_skew,
    gen_synthetic_classification,
    partition_dirichlet,
    partition_iid,
    partition_shards,
    validate_partition,
)
from .decomposition import (
    JointEnsemble,
    cka_similarity,
    covariance_lower_bound_check,
    decompose,
    decompose_equal_weights,
    fma_wens_gap,
    mmd_rbf,
    wens_output,
)
from .federation import (
    AdaptiveParams,
    FederationConfig,
    GmaParams,
    ImaConfig,
    fedgma_mask,
    fednova_aggregate,
    fma_aggregate,
    ima_average,
    local_train,
    mild_exponential,
    run_federation,
    sample_clients,
)
from .landscape import (
    build_plane,
    default_ranges,
    eval_plane,
    interpolate_1d,
    reconstruct_at,
)
from .nn import (
    LrSchedule,
    ModelSpec,
    OptimizerState,
    ParamVector,
    effective_epochs,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    schedule_lr,
    sgd_step,
)
