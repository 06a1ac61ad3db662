"""Per-institution training: minibatch SGD, plateau LR halving and early stopping."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from fedretina.config import (
    BATCH_SIZE,
    EARLY_STOP_PATIENCE,
    EPOCHS,
    IMPROVEMENT_THRESHOLD,
    LEARNING_RATE,
    LR_HALVING_PATIENCE,
    LR_HALVING_PATIENCE_FEDERATED,
)
from fedretina.data_utils import Dataset, InstitutionData, concat_datasets, kfold
from fedretina.errors import ConfigError, EmptyDatasetError, UsageError
from fedretina.metrics import EvaluationReport, evaluate, loss_and_accuracy
from fedretina.model import LayerSpec, Model, build_model, loss_and_grad, sgd_step

logger = logging.getLogger(__name__)

EvaluateFn = Callable[[Model, Dataset], Tuple[float, float]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    lr_initial: float = LEARNING_RATE
    lr_halving_patience: int = LR_HALVING_PATIENCE
    early_stop_patience: int = EARLY_STOP_PATIENCE
    seed: int = 0

    @classmethod
    def federated(cls, **overrides) -> "TrainConfig":
        """Defaults for local training inside a federation (5-epoch LR patience)."""
        overrides.setdefault("lr_halving_patience", LR_HALVING_PATIENCE_FEDERATED)
        return cls(**overrides)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "lr_halving_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr_initial > 0:
            raise ConfigError(f"lr_initial must be positive, got {self.lr_initial}")
        if self.epochs and max(self.lr_halving_patience, self.early_stop_patience) > self.epochs:
            raise ConfigError(
                f"patience values ({self.lr_halving_patience}, {self.early_stop_patience}) "
                f"must not exceed epochs ({self.epochs})"
            )
        return self

    def for_local_epochs(self, epochs: int) -> "TrainConfig":
        """Same config limited to `epochs`, with patience clipped to fit."""
        return replace(
            self,
            epochs=epochs,
            lr_halving_patience=max(1, min(self.lr_halving_patience, epochs)),
            early_stop_patience=max(1, min(self.early_stop_patience, epochs)),
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass(frozen=True)
class PlateauState:
    lr: float
    patience: int
    best: float = float("inf")
    bad_epochs: int = 0
    min_delta: float = IMPROVEMENT_THRESHOLD


def improved(loss: float, best: float, min_delta: float = IMPROVEMENT_THRESHOLD) -> bool:
    return loss < best - min_delta


def lr_schedule_step(state: PlateauState, validation_loss: float) -> Tuple[PlateauState, float]:
    """Halve the LR after `patience` consecutive epochs without improvement."""
    if improved(validation_loss, state.best, state.min_delta):
        state = replace(state, best=validation_loss, bad_epochs=0)
    else:
        bad = state.bad_epochs + 1
        if bad >= state.patience:
            state = replace(state, lr=state.lr / 2.0, bad_epochs=0)
            logger.debug("no improvement for %d epochs, lr -> %g", bad, state.lr)
        else:
            state = replace(state, bad_epochs=bad)
    return state, state.lr


def train_local(model: Model, train: Dataset, validation: Dataset, config: TrainConfig,
                evaluate_fn: Optional[EvaluateFn] = None) -> Tuple[Model, List[EpochRecord]]:
    """Train in place and return the model holding its lowest-validation-loss weights.

    Shuffling derives from (seed, epoch), so a history can be replayed exactly.
    `evaluate_fn(model, validation) -> (loss, accuracy)` defaults to eval-mode
    cross-entropy and accuracy.
    """
    if config.epochs == 0:
        return model, []
    config.validate()
    if len(train) == 0 or len(validation) == 0:
        raise EmptyDatasetError("training and validation sets must be nonempty")
    if config.batch_size > len(train):
        raise UsageError(f"batch_size {config.batch_size} exceeds training set size {len(train)}")
    evaluate_fn = evaluate_fn or loss_and_accuracy

    scheduler = PlateauState(lr=config.lr_initial, patience=config.lr_halving_patience)
    lr = config.lr_initial
    best_loss, best_state = float("inf"), model.state_dict().copy()
    reference, stale = float("inf"), 0
    history: List[EpochRecord] = []
    pixels, labels = train.pixels, train.labels
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch, 0]).permutation(len(train))
        dropout_rng = np.random.default_rng([config.seed, epoch, 1])
        model.train()
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(model, pixels[batch], labels[batch], rng=dropout_rng)
            model.params = sgd_step(model.params, grads, lr)
            total += loss * len(batch)
        model.eval()
        val_loss, val_accuracy = evaluate_fn(model, validation)
        history.append(EpochRecord(epoch + 1, total / len(train), val_loss, val_accuracy, lr))
        logger.info("epoch %d: train %.4f, val %.4f, acc %.3f, lr %g",
                    epoch + 1, total / len(train), val_loss, val_accuracy, lr)

        # best weights follow the strict minimum; patience counts use the threshold
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict().copy()
        if improved(val_loss, reference):
            reference, stale = val_loss, 0
        else:
            stale += 1
        scheduler, lr = lr_schedule_step(scheduler, val_loss)
        if stale >= config.early_stop_patience:
            logger.info("early stop after epoch %d (best val loss %.4f)", epoch + 1, best_loss)
            break

    model.load_state(best_state)
    return model.eval(), history


def train_pooled(specs: Sequence[LayerSpec], institutions: Sequence[InstitutionData],
                 config: TrainConfig, dtype=np.float32) -> Tuple[Model, List[EpochRecord]]:
    """Centralized data-sharing baseline: one model on every institution's data."""
    train = concat_datasets([inst.train for inst in institutions], "pooled/train")
    validation = concat_datasets([inst.validation for inst in institutions], "pooled/validation")
    model = build_model(specs, config.seed, input_shape=train.image_shape, dtype=dtype)
    return train_local(model, train, validation, config)


@dataclass
class CrossValResult:
    reports: List[EvaluationReport] = field(default_factory=list)
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    mean_auc: Optional[float] = None
    std_auc: Optional[float] = None
    model_size_bytes: int = 0

    def summary(self) -> dict:
        return {
            "folds": len(self.reports),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_macro_roc_auc": self.mean_auc,
            "std_macro_roc_auc": self.std_auc,
            "model_size_bytes": self.model_size_bytes,
            "model_size_mb": self.model_size_bytes / 1e6,
        }


def crossval(specs: Sequence[LayerSpec], dataset: Dataset, k: int, config: TrainConfig,
             dtype=np.float32) -> CrossValResult:
    """k-fold protocol: a fresh model (same seed) per fold, scored on the held-out fold."""
    result = CrossValResult()
    for fold, (train, validation) in enumerate(kfold(dataset, k, config.seed)):
        model = build_model(specs, config.seed, input_shape=dataset.image_shape, dtype=dtype)
        model, _ = train_local(model, train, validation, config)
        report = evaluate(model, validation)
        logger.info("fold %d/%d: accuracy %.4f", fold + 1, k, report.accuracy)
        result.reports.append(report)
    accuracies = np.array([r.accuracy for r in result.reports])
    aucs = np.array([r.macro_roc_auc for r in result.reports if r.macro_roc_auc is not None])
    result.mean_accuracy = float(np.mean(accuracies))
    result.std_accuracy = float(np.std(accuracies))
    if aucs.size:
        result.mean_auc, result.std_auc = float(np.mean(aucs)), float(np.std(aucs))
    result.model_size_bytes = result.reports[0].model_size_bytes
    return result
