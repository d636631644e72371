from .decoder import DecoderParams, Encoder
from .evaluate import (
    DecoderField,
    ImlsField,
    aggregate_level,
    evaluate_field,
    evaluate_field_batch,
    gather,
    imls_distance,
)
from .losses import (
    LossBreakdown,
    QuerySamples,
    TrainConfig,
    compute_losses,
    field_gradient,
    field_laplacian,
    sample_training_queries,
)
from .train import Adam, TrainingScene, evaluate_loss, loss_and_grad, train_decoder

__all__ = [
    "DecoderParams",
    "Encoder",
    "DecoderField",
    "ImlsField",
    "aggregate_level",
    "evaluate_field",
    "evaluate_field_batch",
    "gather",
    "imls_distance",
    "LossBreakdown",
    "QuerySamples",
    "TrainConfig",
    "compute_losses",
    "field_gradient",
    "field_laplacian",
    "sample_training_queries",
    "Adam",
    "TrainingScene",
    "evaluate_loss",
    "loss_and_grad",
    "train_decoder",
]
