"""Confusion matrices and the CA / OA / AA / kappa scores derived from them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def confusion_matrix(truth, pred, classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class (0-based)."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ContractError(f"{truth.size} truths vs {pred.size} predictions")
    if truth.size and (truth.min() < 0 or truth.max() >= classes or pred.min() < 0 or pred.max() >= classes):
        raise ContractError(f"class index outside [0, {classes})")
    return np.bincount(truth * classes + pred, minlength=classes * classes).reshape(classes, classes)


@dataclass
class Metrics:
    confusion: np.ndarray
    ca: np.ndarray
    oa: float
    aa: float
    kappa: float

    def to_json(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "ca": [None if np.isnan(v) else float(v) for v in self.ca],
            "confusion": self.confusion.astype(int).tolist(),
        }


def metrics_from_confusion(confusion) -> Metrics:
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise ContractError("cannot score an empty test set")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)
    present = rows > 0
    if not present.all():
        warnings.warn(f"classes {np.nonzero(~present)[0].tolist()} absent from the test set; "
                      "excluded from AA", RuntimeWarning, stacklevel=2)
    oa = float(diag.sum() / total)
    aa = float(ca[present].mean())
    # kappa = (N*trace - sum(row*col)) / (N^2 - sum(row*col)); Python ints keep
    # the ratio exact until the one rounding in the final division
    n, agree = int(total), sum(int(r) * int(c) for r, c in zip(rows, cols))
    kappa = 1.0 if agree == n * n else (n * int(diag.sum()) - agree) / (n * n - agree)
    return Metrics(cm, ca, oa, aa, float(kappa))


METRICS_SCHEMA = {
    "type": "object",
    "required": ["oa", "aa", "kappa", "ca", "confusion", "params", "macs", "config", "seed"],
    "properties": {
        "oa": {"type": "number", "minimum": 0, "maximum": 1},
        "aa": {"type": "number", "minimum": 0, "maximum": 1},
        "kappa": {"type": "number", "maximum": 1},
        "ca": {"type": "array", "items": {"type": ["number", "null"]}},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "params": {"type": "integer", "minimum": 0},
        "macs": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
        "seed": {"type": ["integer", "null"]},
    },
}
