"""ROC analysis, per-window AUC tables and the feature leakage audit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .linear import as_matrix

COLUMNS = ("LR", "ARC1", "ARC2", "NB", "Ensemble")


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not labels.any():
        raise ValueError("labels contain no positive examples")
    if labels.all():
        raise ValueError("labels contain no negative examples")
    return scores, labels


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points for a threshold sweep from the highest score down.

    Tied scores move the curve in a single (possibly diagonal) segment.
    """
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    P, N = tp[-1], fp[-1]
    points = [(0.0, 0.0)]
    points += [(fp[i] / N, tp[i] / P) for i in np.flatnonzero(last_of_group)]
    return [(float(a), float(b)) for a, b in points]


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def auc(scores, labels) -> float:
    """Mann-Whitney rank statistic with ties counted half."""
    scores, labels = _check(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    # average 1-based rank of each tie group
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.repeat(group_rank, ends - starts)
    pos = labels[order]
    P = int(pos.sum())
    N = len(s) - P
    u = ranks[pos].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


@dataclass
class EvalReport:
    aucs: dict[tuple[int, str], float] = field(default_factory=dict)
    counts: dict[int, tuple[int, int]] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)
    runtimes: dict[str, float] = field(default_factory=dict)

    def windows(self):
        return sorted(set(self.counts) | set(self.errors))

    def to_tsv(self) -> str:
        lines = ["Window\t" + "\t".join(COLUMNS)]
        for w in self.windows():
            if w in self.errors:
                cells = ["NA"] * len(COLUMNS)
            else:
                cells = [f"{self.aucs[(w, c)]:.4f}" for c in COLUMNS]
            lines.append(f"{w}-day\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def counts_text(self) -> str:
        lines = []
        for w in self.windows():
            if w in self.counts:
                n, pos = self.counts[w]
                lines.append(f"window {w} test_instances {n} positives {pos} positive_rate {pos / n:.6f}")
            if w in self.errors:
                lines.append(f"window {w} error {self.errors[w]}")
        return "\n".join(lines) + "\n"

    def runtimes_text(self) -> str:
        return "".join(f"{stage} {sec:.3f}\n" for stage, sec in sorted(self.runtimes.items()))


def evaluate_all(models: Mapping[int, object], test_sets: Mapping[int, object]) -> EvalReport:
    """AUC of every base classifier and the ensemble on each window's test split.

    ``models[w].score_columns(test_sets[w])`` must return a mapping from
    column name to scores, plus the labels.  A window whose labels are
    single-class is reported as an error without stopping the others.
    """
    report = EvalReport()
    for w in sorted(models):
        columns, labels = models[w].score_columns(test_sets[w])
        labels = np.asarray(labels, dtype=bool)
        try:
            for c in COLUMNS:
                report.aucs[(w, c)] = auc(columns[c], labels)
        except ValueError as exc:
            report.errors[w] = str(exc)
            for c in COLUMNS:
                report.aucs.pop((w, c), None)
            continue
        report.counts[w] = (len(labels), int(labels.sum()))
    return report


def audit_feature_leakage(X, labels, vocab, min_count: int = 20, rate_threshold: float = 0.9):
    """Vocabulary entries whose presence almost always implies a positive label.

    Returns ``(field, value, positive_rate, count)`` for entries seen at least
    ``min_count`` times with positive rate >= ``rate_threshold``, highest rate
    first.
    """
    X = as_matrix(X, vocab.dimension)
    y = np.asarray(labels, dtype=np.float64)
    if sp.issparse(X):
        counts = np.asarray(X.sum(axis=0)).ravel()
        pos = np.asarray(X.T @ y).ravel()
    else:
        counts = X.sum(axis=0)
        pos = X.T @ y
    flagged = []
    for j in np.flatnonzero(counts >= max(min_count, 1)):
        rate = pos[j] / counts[j]
        if rate >= rate_threshold:
            flagged.append((j, float(rate), int(counts[j])))
    flagged.sort(key=lambda t: (-t[1], -t[2], t[0]))
    return [(*vocab.entries[j], rate, n) for j, rate, n in flagged]
