"""Deterministic simulator and analysis toolkit for masked federated training."""

from .core import ConfigError, DomainBall, NumericError, apply_mask, project_l2, server_average
from .data import (
    ClientDataset,
    ClientGenerator,
    ConstantsReport,
    ObjectiveSpec,
    estimate_constants,
    gen_clients,
    gen_like,
    gradient,
    load_datasets,
    loss,
    save_datasets,
    stochastic_gradient,
)
from .masking import (
    MaskPlan,
    Permutation,
    build_rolling_masks,
    full_plan,
    sample_bernoulli_masks,
    shuffle_permutation,
    substream,
)
from .oracle import (
    DissimilarityReport,
    MaskedObjectiveHandle,
    fm_gradient,
    fm_value,
    fp_gradient,
    fp_value,
    sigma_star,
    solve_masked_optimum,
    stationarity_bound,
    zeta_hat,
)
from .stability import NeighborPair, StabilityResult, coupled_run, generalization_gap, make_neighbor
from .trainer import (
    MetricsRecord,
    TrainConfig,
    TrainResult,
    output_step,
    run,
    run_random_masked_fedavg,
    run_rolling_masked_fedavg,
)

__version__ = "0.1.0"
