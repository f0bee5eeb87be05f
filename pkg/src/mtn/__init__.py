"""Memory Transformer Network for class-incremental learning on fixed features."""

from .data import SyntheticSpec, TaskStream, generate_synthetic, load_stream, split_into_tasks
from .errors import ContractError, DimensionError, EmptyMemoryError, FeatureFileError
from .evaluation import RunMetrics, mem_knn_baseline, top1_accuracy
from .losses import TaskPartition, separated_softmax_loss, task_distillation_loss, total_loss
from .memory import ExemplarMemory, FeatureRecord
from .model import LinearClassifier, MtnConfig, MtnModel
from .numerics import OptimizerState, Tensor, sgd_step
from .trainer import TrainConfig, execute, run_incremental

__all__ = [
    "ContractError", "DimensionError", "EmptyMemoryError", "ExemplarMemory", "FeatureFileError",
    "FeatureRecord", "LinearClassifier", "MtnConfig", "MtnModel", "OptimizerState", "RunMetrics",
    "SyntheticSpec", "TaskPartition", "TaskStream", "Tensor", "TrainConfig", "execute",
    "generate_synthetic", "load_stream", "mem_knn_baseline", "run_incremental",
    "separated_softmax_loss", "sgd_step", "split_into_tasks", "task_distillation_loss",
    "top1_accuracy", "total_loss",
]
