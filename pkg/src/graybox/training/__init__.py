from graybox.training.client import LocalVaultClient, TransportError, VaultClient
from graybox.training.loops import (
    METHODS, SHADE, TEMPERATURE, GrayboxPipeline, History, Record, TrainConfig, TrainingError, TrainResult,
    WhiteboxModel, evaluate_adapters, evaluate_zero_shot, train, train_dga, train_lga, train_whitebox,
)
from graybox.training.metrics import evaluate_classification, evaluate_retrieval, recall_from_similarity
from graybox.training.optim import AdamW, infonce_loss, lr_at

__all__ = [
    "AdamW", "GrayboxPipeline", "History", "LocalVaultClient", "METHODS", "Record", "SHADE", "TEMPERATURE",
    "TrainConfig", "TrainResult", "TrainingError", "TransportError", "VaultClient", "WhiteboxModel",
    "evaluate_adapters", "evaluate_classification", "evaluate_retrieval", "evaluate_zero_shot", "infonce_loss", "lr_at",
    "recall_from_similarity", "train", "train_dga", "train_lga", "train_whitebox",
]
