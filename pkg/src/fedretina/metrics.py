"""Evaluation metrics: accuracy, macro one-vs-rest ROC AUC and confusion matrices."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, roc_auc_score

from fedretina.config import NUM_CLASSES
from fedretina.data_utils import Dataset
from fedretina.errors import EmptyDatasetError, UndefinedMetricError
from fedretina.model import Model, forward, model_size_bytes

EVAL_BATCH = 256


@dataclass
class EvaluationReport:
    accuracy: float
    macro_roc_auc: Optional[float]
    confusion: List[List[int]]
    n_samples: int
    model_size_bytes: int
    per_class_recall: List[Optional[float]] = field(default_factory=list)
    auc_average: str = "macro-ovr"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_csv(self) -> str:
        """Rows are true classes, columns predicted classes."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["true\\pred"] + [str(c) for c in range(len(self.confusion))])
        for true_class, row in enumerate(self.confusion):
            writer.writerow([true_class] + list(row))
        return buffer.getvalue()


def roc_auc_macro(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Mean over present classes of the one-vs-rest AUC (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0] or scores.shape[0] < 1:
        raise UndefinedMetricError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError("ROC AUC is undefined when only one class is present")
    aucs = [roc_auc_score(labels == c, scores[:, c]) for c in present]
    return float(np.mean(aucs))


def report_from_scores(scores: np.ndarray, labels: Sequence[int], size_bytes: int = 0) -> EvaluationReport:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.argmax(scores, axis=1)  # first maximum wins, so ties go to the lowest class
    confusion = confusion_matrix(labels, predictions, labels=list(range(NUM_CLASSES)))
    n_samples = int(labels.shape[0])
    try:
        auc: Optional[float] = roc_auc_macro(scores, labels)
    except UndefinedMetricError:
        auc = None
    row_totals = confusion.sum(axis=1)
    recall = [None if row_totals[c] == 0 else float(confusion[c, c] / row_totals[c]) for c in range(NUM_CLASSES)]
    return EvaluationReport(
        accuracy=float(np.trace(confusion) / n_samples),
        macro_roc_auc=auc,
        confusion=confusion.astype(int).tolist(),
        n_samples=n_samples,
        model_size_bytes=int(size_bytes),
        per_class_recall=recall,
    )


def predict_proba(model: Model, dataset: Dataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode class probabilities; the model's mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        chunks = [forward(model, dataset.pixels[start:start + batch_size])
                  for start in range(0, len(dataset), batch_size)]
    finally:
        model.training = was_training
    return np.concatenate(chunks)


def evaluate(model: Model, test: Dataset) -> EvaluationReport:
    if len(test) == 0:
        raise EmptyDatasetError(f"test set {test.name!r} is empty")
    scores = predict_proba(model, test)
    return report_from_scores(scores, test.labels, model_size_bytes(model))


def loss_and_accuracy(model: Model, dataset: Dataset) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode (used for validation)."""
    probs = predict_proba(model, dataset).astype(np.float64)
    picked = np.maximum(probs[np.arange(len(dataset)), dataset.labels], np.finfo(np.float64).tiny)
    loss = float(-np.mean(np.log(picked)))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == dataset.labels))
    return loss, accuracy
