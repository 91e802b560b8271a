"""Training-history analysis: find forgotten examples, fuse checkpoints, condense the result."""
from __future__ import annotations

__version__ = "0.1.0"

from .fusion import (
    FusedProbs,
    FusionPlan,
    accuracy_of,
    best_epoch,
    epoch_accuracies,
    fit_plan,
    fixed_jumps_ensemble,
    fuse,
    fused_checkpoint_count,
    horizontal_ensemble,
)
from .linearlab import (
    ForgetTimePrediction,
    LinearLabRun,
    closed_form,
    closed_form_track,
    eigenbasis,
    forget_analysis,
    forget_rate,
    gd_trajectory,
    least_squares_target,
    max_relative_deviation,
)
from .metrics import (
    ForgetReport,
    NoiseLossReport,
    forget_report,
    forget_times,
    noise_loss_counts,
)
from .models import (
    Architecture,
    Batch,
    CrossEntropyLoss,
    DistillLoss,
    ModelWeights,
    SquaredLoss,
    ema_update,
    forward,
    grad,
    init_weights,
    load_weights,
    loss_and_grad,
    loss_value,
    save_weights,
    sgd_step,
    softmax,
)
from .predlog import (
    BadMagicError,
    CorrectnessMatrix,
    FormatError,
    LogValidationError,
    PredictionLog,
    TruncatedFileError,
    VersionMismatchError,
    correctness,
    expected_size,
    read_csv_log,
    read_log,
    write_log,
)
from .trainer import (
    DatasetSpec,
    DivergenceError,
    ExperimentConfig,
    ModelSpec,
    NoiseSpec,
    RunArtifacts,
    average_weights,
    distill,
    inject_noise,
    make_gaussian_mixture,
    predict_probs,
    run,
    train_model,
)
