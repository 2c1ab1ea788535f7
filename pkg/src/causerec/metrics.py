"""Evaluation metrics and lift reporting."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .datamodel import bce_vec
from .errors import DimensionError, DomainError, UndefinedMetricError

CSV_HEADER = ("method", "dataset", "seed", "n_events", "avg_cr", "mse", "mse_lift", "nll", "nll_lift", "auc")


class LiftKind(str, enum.Enum):
    LOSS_LOWER_BETTER = "loss"


def _pair(preds, labels):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if preds.size == 0:
        raise DimensionError("empty input")
    return preds, labels


def mse(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean((p - y) ** 2))


def nll(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(bce_vec(p, y)))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def lift(metric_value: float, baseline_value: float, kind=LiftKind.LOSS_LOWER_BETTER) -> float:
    """Relative improvement over the baseline; positive when the loss went down."""
    LiftKind(kind)
    if baseline_value <= 0:
        raise DomainError("baseline metric must be positive")
    return (baseline_value - metric_value) / baseline_value


def avg_cr(labels) -> float:
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise DimensionError("empty labels")
    return float(y.mean())


@dataclass
class MetricReport:
    method: str
    dataset: str
    seed: int
    n_events: int
    avg_cr: float
    mse: float | None
    mse_lift: float | None
    nll: float | None
    nll_lift: float | None
    auc: float | None

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in asdict(self).values())

    @classmethod
    def from_csv_row(cls, row: str) -> "MetricReport":
        f = row.rstrip("\n").split(",")
        if len(f) != len(CSV_HEADER):
            raise DimensionError(f"expected {len(CSV_HEADER)} fields, got {len(f)}")
        num = [float(v) if v else None for v in f[4:]]
        return cls(f[0], f[1], int(f[2]), int(f[3]), *num)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def evaluate(method: str, dataset: str, seed: int, labels, probs=None, scores=None) -> MetricReport:
    """Score a method on test labels against the constant average-conversion predictor.

    ``probs`` drive MSE/NLL; ``scores`` (defaulting to ``probs``) drive AUC.
    Methods without calibrated probabilities pass only ``scores``.
    """
    y = np.asarray(labels, dtype=np.float64)
    base = avg_cr(y)
    const = np.full(y.shape, base)
    m = n = m_lift = n_lift = None
    if probs is not None:
        m, n = mse(probs, y), nll(probs, y)
        m_base, n_base = mse(const, y), nll(const, y)
        m_lift = lift(m, m_base) if m_base > 0 else None
        n_lift = lift(n, n_base) if n_base > 0 else None
    ranking = scores if scores is not None else probs
    a = auc(ranking, y) if ranking is not None else None
    return MetricReport(method, dataset, int(seed), int(y.size), base, m, m_lift, n, n_lift, a)


def label_entropy(labels) -> float:
    q = avg_cr(labels)
    if q in (0.0, 1.0):
        return 0.0
    return -(q * math.log(q) + (1 - q) * math.log(1 - q))
