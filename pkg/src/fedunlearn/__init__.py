"""Federated unlearning lab.

Train small networks with FedAvg across simulated clients, score every
parameter by how much of its curvature comes from the data to be forgotten,
reset the top-scoring fraction per layer and retrain only those entries.
"""

__version__ = "0.1.0"

from fedunlearn.data import (
    BackdoorSpec,
    Dataset,
    Partition,
    Selector,
    apply_trigger,
    digits_datasets,
    load_idx,
    mark_forget,
    partition_preferential,
    partition_random,
    poison,
    save_idx,
    synth_blobs,
    train_test_split,
    write_digits_idx,
)
from fedunlearn.errors import (
    ConfigError,
    DataFormatError,
    FedUnlearnError,
    InsufficientDataError,
    NothingToForgetError,
    NumericError,
    ShapeError,
    SpecError,
    UndefinedMetricError,
)
from fedunlearn.federation import ALL, FORGET_ONLY, RETAIN_ONLY, Client, FedConfig, Timing, derive_seed, fed_train
from fedunlearn.nn import (
    FD_EXACT,
    GGN,
    Dense,
    Flatten,
    HessianDiag,
    NetworkSpec,
    ParamSet,
    ReLU,
    hessian_diag,
    init_params,
    loss_and_grad,
    predict,
)
from fedunlearn.unlearn import (
    GaussianFamily,
    InfoScores,
    ResetMask,
    TrimState,
    aggregate_hessians,
    client_stats,
    reset_params,
    select_reset_mask,
    target_information_score,
    trim_initialize,
    trim_retrain,
    unlearn_pipeline,
)
