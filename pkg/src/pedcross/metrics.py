"""Binary-classification metrics: confusion at a threshold, rank-based AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, OneClassOnly


@dataclass
class MetricReport:
    acc: float
    auc: float | None
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    threshold: float = 0.5
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc, "auc": self.auc, "f1": self.f1,
            "precision": self.precision, "recall": self.recall,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "n": self.n, "threshold": self.threshold, "config": self.config,
        }


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks so each tied
    pair contributes exactly one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly(f"need both classes, got {n_pos} positive / {n_neg} negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = cum - (counts - 1) / 2.0          # 1-based average rank per value
    ranks = avg_rank[inverse]
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metrics(scores, labels, threshold: float = 0.5, config: dict | None = None) -> MetricReport:
    """Confusion-derived metrics at the threshold (inclusive: score >= threshold
    predicts crossing). Precision/recall/F1 fall back to 0 when their
    denominators vanish; AUC is None when only one class is present."""
    scores, labels = _check(scores, labels)
    if scores.size < 1:
        raise LengthMismatch("need at least one sample")
    preds = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    n = scores.size
    acc = (tp + tn) / n
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    try:
        auc_value = auc(scores, labels)
    except OneClassOnly:
        auc_value = None
    return MetricReport(acc=acc, auc=auc_value, f1=f1, precision=precision,
                        recall=recall, tp=tp, fp=fp, tn=tn, fn=fn, n=n,
                        threshold=threshold, config=dict(config or {}))
