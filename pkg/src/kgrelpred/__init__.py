"""Knowledge-graph relation prediction from attention-enhanced message
passing and semantic path encodings."""

from .encoder import AttentionConfig, AttentionAudit
from .evaluation import (
    MetricsReport,
    RankResult,
    confusion_matrix,
    evaluate_checkpoint,
    evaluate_model,
    rank_relation,
    summarize,
)
from .graph import FORWARD, REVERSE, KnowledgeGraph, PathToken, Triple, load_dataset
from .model import RelationModel
from .optim import ParameterStore, adam_step
from .paths import PathIndex, PathVocabulary, build_path_vocabulary
from .training import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    load_checkpoint,
    model_from_checkpoint,
    new_model,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionAudit",
    "AttentionConfig",
    "Checkpoint",
    "FORWARD",
    "KnowledgeGraph",
    "MetricsReport",
    "ParameterStore",
    "PathIndex",
    "PathToken",
    "PathVocabulary",
    "RankResult",
    "RelationModel",
    "REVERSE",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "Triple",
    "adam_step",
    "build_path_vocabulary",
    "confusion_matrix",
    "evaluate_checkpoint",
    "evaluate_model",
    "load_checkpoint",
    "load_dataset",
    "model_from_checkpoint",
    "new_model",
    "rank_relation",
    "save_checkpoint",
    "summarize",
    "train",
]
