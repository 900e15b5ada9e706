"""Confidence-gated early-exit networks: training, inference, calibration,
and a threshold-sweep experiment harness."""

from .calibration import (
    BinStats,
    CalibrationReport,
    bin_predictions,
    calibration_report,
    ece,
)
from .data import Dataset, SplitResult, SyntheticSpec, gen_synthetic, load_csv, save_csv, split
from .estimator import EarlyExitClassifier
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GatewireError,
    OptimizerError,
    ProbabilityError,
    SchedulerError,
    ShapeError,
    SpecError,
)
from .gating import (
    GateConfig,
    InferenceResult,
    confidence,
    ensemble_predict,
    infer_batch,
    infer_one,
)
from .graph import (
    BatchNorm,
    Linear,
    Model,
    NetworkSpec,
    Relu,
    Residual,
    SideNetSpec,
    build,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .harness import (
    SweepResult,
    SweepRow,
    compare_with_without,
    default_network_spec,
    default_synthetic_spec,
    run_experiment,
    sweep,
)
from .tensor import BatchNormState, Tensor
from .training import (
    Adam,
    PlateauScheduler,
    TrainConfig,
    TrainLog,
    check_gradient_independence,
    joint_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BatchNorm",
    "BatchNormState",
    "BinStats",
    "CalibrationReport",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "EarlyExitClassifier",
    "GateConfig",
    "GatewireError",
    "InferenceResult",
    "Linear",
    "Model",
    "NetworkSpec",
    "OptimizerError",
    "PlateauScheduler",
    "ProbabilityError",
    "Relu",
    "Residual",
    "SchedulerError",
    "ShapeError",
    "SideNetSpec",
    "SpecError",
    "SplitResult",
    "SweepResult",
    "SweepRow",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "bin_predictions",
    "build",
    "calibration_report",
    "check_gradient_independence",
    "compare_with_without",
    "confidence",
    "default_network_spec",
    "default_synthetic_spec",
    "ece",
    "ensemble_predict",
    "gen_synthetic",
    "infer_batch",
    "infer_one",
    "joint_loss",
    "load_checkpoint",
    "load_csv",
    "param_count",
    "run_experiment",
    "save_checkpoint",
    "save_csv",
    "split",
    "sweep",
    "train",
]
