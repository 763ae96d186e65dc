"""Accuracy and F1 from a confusion matrix.

Macro-F1 averages per-class F1 over the classes present in the ground truth
of the evaluated set, so a class a domain structurally lacks does not drag
the average down.
"""

from __future__ import annotations

import numpy as np


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """``(K, K)`` counts; rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} must be equal-length vectors")
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on an empty evaluation set")
    for name, v in (("labels", labels), ("preds", preds)):
        if v.min() < 0 or v.max() >= n_classes:
            raise ValueError(f"{name} must lie in [0, {n_classes - 1}]")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(preds, labels, n_classes: int) -> dict:
    cm = confusion_matrix(preds, labels, n_classes)
    total = int(cm.sum())
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class = []
    for k in range(n_classes):
        tp = int(cm[k, k])
        per_class.append(f1_from_counts(tp, int(predicted[k]) - tp, int(support[k]) - tp))
    present = [k for k in range(n_classes) if support[k] > 0]
    macro = sum(per_class[k] for k in present) / len(present)
    weighted = sum(per_class[k] * int(support[k]) for k in present) / total
    return {
        "accuracy": int(np.trace(cm)) / total,
        "macro_f1": macro,
        "weighted_f1": weighted,
        "per_class_f1": per_class,
        "present_classes": present,
        "n_samples": total,
        "confusion": cm.tolist(),
    }
