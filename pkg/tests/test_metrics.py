import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrisk.featurize import FeatureVocabulary
from edrisk.metrics import COLUMNS, EvalReport, audit_feature_leakage, auc, evaluate_all, roc_curve, trapezoid_area


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_perfect_ranking_curve():
    assert roc_curve([0.9, 0.1], [1, 0]) == [(0, 0), (0, 1), (1, 1)]
    assert auc([0.9, 0.1], [1, 0]) == 1.0


def test_all_tied():
    assert roc_curve([0.3] * 4, [1, 0, 1, 0]) == [(0, 0), (1, 1)]
    assert auc([0.3] * 4, [1, 0, 1, 0]) == 0.5


@pytest.mark.parametrize("labels, missing", [([1, 1], "negative"), ([0, 0], "positive")])
def test_single_class_is_an_error(labels, missing):
    with pytest.raises(ValueError, match=missing):
        auc([0.1, 0.2], labels)


scored = st.integers(2, 300).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 20).map(lambda k: k / 20), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n),
)).filter(lambda sl: 0 < sum(sl[1]) < len(sl[1]))


@settings(max_examples=200, deadline=None)
@given(scored)
def test_curve_matches_confusion_matrix_sweep(sl):
    scores, labels = sl
    s, y = np.array(scores), np.array(labels)
    P, N = y.sum(), (~y).sum()
    expected = [(0.0, 0.0)] + [(float(((s >= t) & ~y).sum() / N), float(((s >= t) & y).sum() / P))
                               for t in sorted(set(scores), reverse=True)]
    curve = roc_curve(scores, labels)
    assert curve == expected
    assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(curve, curve[1:]))
    assert curve[-1] == (1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(scored)
def test_auc_identities(sl):
    scores, labels = sl
    a = auc(scores, labels)
    assert abs(a - pair_count_auc(scores, labels)) <= 1e-12
    assert abs(a - trapezoid_area(roc_curve(scores, labels))) <= 1e-12
    s = np.array(scores)
    assert auc(2 * s + 1, labels) == a
    assert auc(s ** 3, labels) == a
    assert abs(a + auc(scores, [not y for y in labels]) - 1) <= 1e-12


class _FixedModel:
    def __init__(self, scores):
        self.scores = scores

    def score_columns(self, batch):
        return {c: self.scores for c in COLUMNS}, batch


def test_identical_columns_give_equal_aucs():
    report = evaluate_all({7: _FixedModel([0.2, 0.4, 0.9, 0.1])}, {7: [0, 1, 1, 0]})
    assert len({report.aucs[(7, c)] for c in COLUMNS}) == 1


def test_degenerate_window_reported_without_stopping_others():
    models = {3: _FixedModel([0.1, 0.2]), 7: _FixedModel([0.1, 0.2])}
    report = evaluate_all(models, {3: [0, 0], 7: [0, 1]})
    assert 3 in report.errors and report.aucs[(7, "LR")] == 1.0
    assert "NA" in report.to_tsv().splitlines()[1]


def test_report_layout():
    report = EvalReport(aucs={(14, c): 0.8 for c in COLUMNS}, counts={14: (100, 2)})
    assert report.to_tsv() == "Window\tLR\tARC1\tARC2\tNB\tEnsemble\n14-day\t0.8000\t0.8000\t0.8000\t0.8000\t0.8000\n"
    assert "positive_rate 0.020000" in report.counts_text()


def _audit_data():
    vocab = FeatureVocabulary([("px_any", "137"), ("dx_any", "1"), ("dx_any", "2")])
    X = np.zeros((100, 3))
    y = np.zeros(100, dtype=bool)
    X[:40, 0] = 1
    y[:39] = True          # 39 of 40 carriers positive
    X[:, 1] = 1            # everyone: rate 0.39
    X[99, 2] = 1
    y[99] = True           # a single positive carrier
    return X, y, vocab


def test_audit_flags_leaky_feature_first():
    X, y, vocab = _audit_data()
    flags = audit_feature_leakage(X, y, vocab, min_count=20, rate_threshold=0.9)
    assert flags == [("px_any", "137", 39 / 40, 40)]


def test_audit_unattainable_threshold():
    X, y, vocab = _audit_data()
    assert audit_feature_leakage(X, y, vocab, rate_threshold=1.01) == []


def test_audit_count_gate():
    X, y, vocab = _audit_data()
    assert ("dx_any", "2") in [f[:2] for f in audit_feature_leakage(X, y, vocab, min_count=1)]
    assert ("dx_any", "2") not in [f[:2] for f in audit_feature_leakage(X, y, vocab, min_count=2)]
