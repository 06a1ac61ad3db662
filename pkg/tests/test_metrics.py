import itertools

import numpy as np
import pytest

from fedretina.data_utils import Dataset
from fedretina.errors import EmptyDatasetError, UndefinedMetricError
from fedretina.metrics import (
    EvaluationReport,
    evaluate,
    loss_and_accuracy,
    predict_proba,
    report_from_scores,
    roc_auc_macro,
)
from fedretina.model import model_size_bytes


def brute_force_auc(scores, labels):
    """Pairwise definition: P(score of a positive > score of a negative), ties count one half."""
    aucs = []
    for c in np.unique(labels):
        positives = scores[labels == c, c]
        negatives = scores[labels != c, c]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(positives, negatives))
        aucs.append(wins / (len(positives) * len(negatives)))
    return float(np.mean(aucs))


def brute_force_confusion(scores, labels):
    confusion = [[0] * 5 for _ in range(5)]
    for row, label in zip(scores, labels):
        best = max(row)
        predicted = next(c for c in range(5) if row[c] == best)
        confusion[label][predicted] += 1
    return confusion


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_pairwise_definition(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=40)
    labels[:5] = np.arange(5)
    scores = rng.random((40, 5)).round(1)  # rounding forces ties
    assert roc_auc_macro(scores, labels) == pytest.approx(brute_force_auc(scores, labels))


def test_auc_skips_absent_classes():
    labels = np.array([0, 0, 2, 2])
    scores = np.array([[0.9, 0, 0.1, 0, 0], [0.8, 0, 0.2, 0, 0], [0.1, 0, 0.9, 0, 0], [0.3, 0, 0.7, 0, 0]])
    assert roc_auc_macro(scores, labels) == 1.0


def test_auc_undefined_for_one_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc_macro(np.full((3, 5), 0.2), [1, 1, 1])


def test_constant_predictor():
    labels = np.repeat(np.arange(5), 4)
    report = report_from_scores(np.full((20, 5), 0.2), labels)
    assert report.accuracy == pytest.approx(0.2)
    assert report.macro_roc_auc == pytest.approx(0.5)
    assert report.confusion[3] == [4, 0, 0, 0, 0]
    assert report.per_class_recall == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_single_class_report_has_no_auc():
    report = report_from_scores(np.eye(5)[[2, 2, 1]], [2, 2, 2])
    assert report.macro_roc_auc is None
    assert report.accuracy == pytest.approx(2 / 3)
    assert report.per_class_recall[0] is None


def test_report_serialization():
    report = report_from_scores(np.eye(5), np.arange(5), size_bytes=123)
    assert EvaluationReport.from_dict(report.to_dict()) == report
    lines = report.confusion_csv().splitlines()
    assert lines[0] == "true\\pred,0,1,2,3,4"
    assert lines[1] == "0,1,0,0,0,0"
    assert '"model_size_bytes": 123' in report.to_json()


def test_evaluate_model(tiny_model, synthetic_small):
    tiny_model.train()
    report = evaluate(tiny_model, synthetic_small)
    assert tiny_model.training
    assert report.n_samples == len(synthetic_small)
    assert sum(map(sum, report.confusion)) == len(synthetic_small)
    assert 0.0 <= report.accuracy <= 1.0
    assert report.model_size_bytes == model_size_bytes(tiny_model)


def test_predict_proba_batches_agree(tiny_model, synthetic_small):
    whole = predict_proba(tiny_model, synthetic_small)
    chunked = predict_proba(tiny_model, synthetic_small, batch_size=7)
    np.testing.assert_allclose(whole, chunked, rtol=1e-5, atol=1e-7)


def test_loss_and_accuracy(tiny_model, synthetic_small):
    loss, accuracy = loss_and_accuracy(tiny_model, synthetic_small)
    probs = predict_proba(tiny_model, synthetic_small).astype(np.float64)
    expected = -np.mean(np.log(probs[np.arange(len(synthetic_small)), synthetic_small.labels]))
    assert loss == pytest.approx(expected)
    assert accuracy == pytest.approx(evaluate(tiny_model, synthetic_small).accuracy)


def test_evaluate_empty_set(tiny_model):
    empty = Dataset(np.zeros((0, 32, 32, 3)), [], "empty")
    with pytest.raises(EmptyDatasetError):
        evaluate(tiny_model, empty)


def test_report_matches_oracles_on_random_cases():
    rng = np.random.default_rng(99)
    for case in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 5, size=n)
        labels[:2] = rng.choice(5, size=2, replace=False)
        scores = rng.random((n, 5))
        if case % 2:
            scores = scores.round(1)
        report = report_from_scores(scores, labels)
        confusion = brute_force_confusion(scores.tolist(), labels.tolist())
        assert report.confusion == confusion, case
        assert report.accuracy == pytest.approx(sum(confusion[c][c] for c in range(5)) / n, abs=1e-9)
        assert report.macro_roc_auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-9), case
