import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from edrisk.arc import RuleSet
from edrisk.linear import LogisticModel, NaiveBayesModel, constant_logistic
from edrisk.metrics import auc
from edrisk.stack import (
    BASE_NAMES,
    PATIENT,
    RECORD,
    TEST,
    TRAIN,
    VALIDATION,
    EnsembleConfig,
    predict_ensemble,
    prepare_visit,
    split_dataset,
    subset_batch,
    train_ensemble,
)

from conftest import make_visit, synthetic_items


def visits_for(n, patients=None):
    return [make_visit(visit_id=f"s{i:06d}", patient=f"p{i % patients}" if patients else f"p{i}") for i in range(n)]


def test_ten_records_split_exactly():
    assert split_dataset(visits_for(10), seed=3).sizes() == (8, 1, 1)


def test_too_few_instances():
    with pytest.raises(ValueError):
        split_dataset(visits_for(9), seed=0)


def test_split_deterministic_and_order_free():
    vs = visits_for(500)
    a = split_dataset(vs, seed=5)
    assert a == split_dataset(vs, seed=5) == split_dataset(vs[::-1], seed=5)
    assert a != split_dataset(vs, seed=6)


def test_large_split_fractions_and_patient_integrity():
    vs = visits_for(100_000, patients=30_000)
    for unit in (RECORD, PATIENT):
        split = split_dataset(vs, seed=1, unit=unit)
        sizes = np.array(split.sizes()) / len(vs)
        assert np.all(np.abs(sizes - [0.8, 0.1, 0.1]) < 0.01)
    seen = {}
    for v in vs:
        seen.setdefault(v.patient_key, set()).add(split.assignment[v.visit_id])
    assert all(len(s) == 1 for s in seen.values())


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 400), st.integers(1, 50), st.integers(0, 2**32 - 1), st.sampled_from([RECORD, PATIENT]))
def test_split_is_a_partition(n, patients, seed, unit):
    vs = visits_for(n, patients)
    split = split_dataset(vs, seed, unit)
    parts = [set(split.ids(s)) for s in (TRAIN, VALIDATION, TEST)]
    assert set.union(*parts) == {v.visit_id for v in vs}
    assert sum(len(p) for p in parts) == n
    if unit == RECORD:
        # cut sizes round half up, computed exactly
        n_train = math.floor(Fraction(4, 5) * n + Fraction(1, 2))
        n_val = math.floor(Fraction(1, 10) * n + Fraction(1, 2))
        assert split.sizes() == (n_train, n_val, n - n_train - n_val)


def test_stages_consume_only_their_split(small_run):
    *_, report = small_run
    stages = dict(report.stages)
    assert stages.pop("meta") == VALIDATION
    assert set(stages.values()) == {TRAIN}
    assert report.thresholds["ARC1"] in EnsembleConfig().support_grid


def test_meta_is_sigmoid_of_recorded_combination(small_run):
    _, items, labels, split, model, _ = small_run
    batch = subset_batch(items, labels, split, TEST)
    base = model.base_scores(batch.items)
    by_hand = expit(base @ model.meta.weights + model.meta.intercept)
    assert np.array_equal(model.score(batch.items), by_hand)


def test_zero_meta_gives_half(small_run):
    _, items, labels, split, model, _ = small_run
    flat = dataclasses.replace(model, meta=LogisticModel(np.zeros(4), 0.0))
    assert np.all(flat.score(items[:50]) == 0.5)


def test_single_meta_weight_preserves_base_auc(small_run):
    _, items, labels, split, model, _ = small_run
    batch = subset_batch(items, labels, split, TEST)
    for k, name in enumerate(BASE_NAMES):
        w = np.zeros(4)
        w[k] = 1.7
        columns, y = dataclasses.replace(model, meta=LogisticModel(w, -0.3)).score_columns(batch)
        assert auc(columns["Ensemble"], y) == auc(columns[name], y)


def test_prior_only_bases_give_chance(small_run):
    _, items, labels, split, model, _ = small_run
    d = model.vocabulary.dimension
    same = np.full((2, d), np.log(0.5))
    degenerate = dataclasses.replace(
        model,
        logistic=constant_logistic(d, 0.02),
        naive_bayes=NaiveBayesModel(np.log([0.98, 0.02]), same, same.copy()),
        arc1=RuleSet([], 1, (0.98, 0.02)),
        arc2=RuleSet([], 1, (0.98, 0.02)),
    )
    columns, y = degenerate.score_columns(subset_batch(items, labels, split, TEST))
    assert auc(columns["Ensemble"], y) == 0.5


def test_predict_ensemble_equals_staged_recomputation(small_run):
    timelines, items, labels, split, model, _ = small_run
    for p in items[:200:7]:
        tl = timelines[p.visit.patient_key]
        staged = prepare_visit(p.visit, tl)
        base = model.base_scores([staged])
        assert predict_ensemble(model, p.visit, tl) == float(model.combine(base)[0])


def test_training_is_deterministic(small_run):
    _, items, labels, split, model, report = small_run
    again, report2 = train_ensemble(items, labels, split, 14)
    assert report2.to_text() == report.to_text()
    assert again.meta.to_text() == model.meta.to_text()
    assert again.arc2.to_text() == model.arc2.to_text()


def test_empty_validation_is_an_error(small_run):
    _, items, labels, split, _, _ = small_run
    gutted = dataclasses.replace(split, assignment={k: (TEST if v == VALIDATION else v) for k, v in split.assignment.items()})
    with pytest.raises(Exception, match="validation"):
        train_ensemble(items, labels, gutted, 14)


def test_perfect_feature_lifts_ensemble():
    _, items, labels, split = synthetic_items(n_patients=3000, seed=4, leakage_capture=1.0, leakage_purity=1.0)
    model, _ = train_ensemble(items, labels, split, 14)
    columns, y = model.score_columns(subset_batch(items, labels, split, TEST))
    assert auc(columns["Ensemble"], y) > 0.95
