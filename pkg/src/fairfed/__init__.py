"""Group-robust federated training simulator.

Library entry points are re-exported here; the command-line interface lives
in ``fairfed.cli``.
"""

from .core import (
    ALGORITHMS,
    ClientData,
    ConfigError,
    DataError,
    FairFedError,
    FederatedDataset,
    GroupEntry,
    GroupIndex,
    ModelParams,
    RoundRecord,
    RunConfig,
    RunTrace,
    SimplexWeights,
    build_group_index,
    params_digest,
    rng_stream,
)
from .datagen import (
    PartitionSpec,
    TabularSchema,
    load_dataset,
    load_tabular_csv,
    make_two_group_quadratic_toy,
    partition,
    save_dataset,
    split_holdout,
    synth_feature_shift,
    synth_label_shift,
)
from .engine import (
    ServerState,
    aggregate,
    evaluate_agnostic,
    group_losses,
    load_checkpoint,
    local_sgd,
    resume_train,
    run_round,
    sample_clients,
    save_checkpoint,
    train,
)
from .metrics import (
    MetricsReport,
    fit_convergence_rate,
    group_losses_full,
    level_risks,
    momentum_direction_diagnostic,
    report_for,
    saddle_duality_gap,
    verify_theorem41,
)
from .models import Batch, ModelSpec, accuracy, grad_loss, loss, per_sample_losses
from .selfcheck import CheckResult, run_suite
from .simplexmath import (
    euclidean_step_projected,
    kl_divergence,
    mirror_step_entropy,
    mirror_step_entropy_masked,
    momentum_params,
    momentum_weights,
    project_simplex,
    solve_mirror_subproblem,
    tilt_weights_kl,
)

__version__ = "0.1.0"
