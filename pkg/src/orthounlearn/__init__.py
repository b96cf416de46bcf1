"""Incremental class unlearning with orthogonal feature and gradient projections."""
from .data import Dataset, default_schedule, gen_synthetic, load_csv, partition_tasks, save_csv
from .model import (
    Model,
    ModelConfig,
    attach_lora,
    backward,
    forward,
    init_model,
    load_checkpoint,
    mask_head,
    merge_lora,
    predict,
    save_checkpoint,
)
from .scenario import (
    MetricsRecord,
    PretrainConfig,
    ProbeConfig,
    build_subspaces,
    evaluate,
    h_mean,
    pretrain,
    projection_energy_probe,
    recovery_probe,
    retrain_oracle,
    run_incremental,
)
from .subspace import Subspace, decompose, expand, project, residual, span_distance
from .unlearn import LossBreakdown, SubspaceSet, TrainConfig, UnlearnTask, project_gradient, total_loss, unlearn_task

__version__ = "0.1.0"
