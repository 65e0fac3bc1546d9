"""Classification metrics for argmax predictions."""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .model import LayeredModel, predict


def accuracy_and_macro_f1(pred, truth) -> tuple[float, float]:
    """Accuracy and macro-F1.

    Macro-F1 averages over every class that occurs in the truth or the
    predictions; a class that is predicted but never true scores 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or truth.size == 0:
        raise DataError("predictions and labels must be non-empty and equally long")
    acc = float(np.count_nonzero(pred == truth)) / truth.size
    f1s = []
    for c in np.union1d(pred, truth):
        tp = np.count_nonzero((pred == c) & (truth == c))
        fp = np.count_nonzero((pred == c) & (truth != c))
        fn = np.count_nonzero((pred != c) & (truth == c))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return acc, float(sum(f1s) / len(f1s))


def evaluate(model: LayeredModel, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if len(y) == 0:
        raise DataError("evaluation set is empty")
    return accuracy_and_macro_f1(predict(model, x), y)
