"""Train/validation/test partitioning and the two-stage stacked ensemble.

Four base classifiers (logistic regression, naive Bayes and two rule
classifiers) are fit on the training split.  Their probabilities on the
validation split are the inputs of a second logistic regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logit

from . import arc
from .arc import RuleSet, Transaction
from .cohort import LabeledIndexVisit, PatientTimeline, VisitRecord
from .featurize import (
    DEFAULT_COUNT_BINS,
    DEFAULT_EXCLUDED_FIELDS,
    FeatureVocabulary,
    TemporalContext,
    build_vocabulary,
    compute_temporal_context,
    encode_visit,
    extract_horizontal_itemset,
    extract_longitudinal_itemset,
    to_csr,
)
from .linear import (
    LogisticModel,
    LogisticParams,
    NaiveBayesModel,
    fit_logistic,
    fit_naive_bayes,
    predict_logistic_batch,
    predict_naive_bayes_batch,
)
from .metrics import COLUMNS, audit_feature_leakage, auc

TRAIN, VALIDATION, TEST = "TRAIN", "VALIDATION", "TEST"
RECORD, PATIENT = "RECORD", "PATIENT"
RATIOS = (0.8, 0.1, 0.1)
BASE_NAMES = ("LR", "ARC1", "ARC2", "NB")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class PreparedVisit:
    """An ED index visit with everything the four base models look at."""

    visit: VisitRecord
    context: TemporalContext
    longitudinal: frozenset
    horizontal: frozenset

    @property
    def visit_id(self) -> str:
        return self.visit.visit_id


def prepare_visit(visit: VisitRecord, timeline: PatientTimeline) -> PreparedVisit:
    return PreparedVisit(
        visit,
        compute_temporal_context(timeline, visit),
        extract_longitudinal_itemset(timeline, visit),
        extract_horizontal_itemset(visit),
    )


def prepare_index_visits(timelines: Mapping[str, PatientTimeline]) -> list[PreparedVisit]:
    out = []
    for key in sorted(timelines):
        tl = timelines[key]
        out.extend(prepare_visit(v, tl) for v in tl.visits if v.is_ed)
    return out


@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    seed: int
    unit: str
    ratios: tuple[float, float, float] = RATIOS

    def ids(self, subset: str) -> list[str]:
        return sorted(k for k, v in self.assignment.items() if v == subset)

    def sizes(self) -> tuple[int, int, int]:
        vals = list(self.assignment.values())
        return (vals.count(TRAIN), vals.count(VALIDATION), vals.count(TEST))


def _cut_points(n: int) -> tuple[int, int]:
    n_train = math.floor(RATIOS[0] * n + 0.5)
    n_val = math.floor(RATIOS[1] * n + 0.5)
    return n_train, n_train + n_val


def split_dataset(instances: Iterable, seed: int, unit: str = RECORD) -> SplitAssignment:
    """Random 80/10/10 partition of index visits, by record or by patient.

    Instances may be LabeledIndexVisits, PreparedVisits or VisitRecords.  The
    assignment depends only on the set of visit ids (and patient keys), never
    on input order.
    """
    if unit not in (RECORD, PATIENT):
        raise ValueError(f"unit must be {RECORD} or {PATIENT}")
    visits = [getattr(x, "visit", x) for x in instances]
    n = len(visits)
    if n < 10:
        raise ValueError(f"need at least 10 instances to split, got {n}")
    rng = np.random.default_rng(seed)
    cut1, cut2 = _cut_points(n)
    assignment = {}
    if unit == RECORD:
        ids = sorted(v.visit_id for v in visits)
        if len(set(ids)) != n:
            raise ValueError("duplicate visit ids")
        for rank, k in enumerate(rng.permutation(n)):
            assignment[ids[k]] = TRAIN if rank < cut1 else VALIDATION if rank < cut2 else TEST
    else:
        groups: dict[str, list[str]] = {}
        for v in visits:
            groups.setdefault(v.patient_key, []).append(v.visit_id)
        keys = sorted(groups)
        filled = 0
        for k in rng.permutation(len(keys)):
            members = groups[keys[k]]
            subset = TRAIN if filled < cut1 else VALIDATION if filled < cut2 else TEST
            for vid in members:
                assignment[vid] = subset
            filled += len(members)
    return SplitAssignment(assignment, seed, unit)


@dataclass
class EnsembleConfig:
    logistic: LogisticParams = field(default_factory=LogisticParams)
    nb_alpha: float = 1.0
    support_grid: tuple[int, ...] = arc.DEFAULT_SUPPORT_GRID
    arc1_support: int | None = None  # fixed threshold; tuned when None
    arc2_support: int | None = None
    max_antecedent_len: int | None = arc.DEFAULT_MAX_LEN
    tie_break: str = "lexicographic"
    meta: LogisticParams = field(default_factory=LogisticParams)
    meta_inputs: str = "probability"  # or "logit"
    count_bins: tuple[int, ...] = DEFAULT_COUNT_BINS
    excluded_fields: tuple[str, ...] = DEFAULT_EXCLUDED_FIELDS
    audit_min_count: int = 20
    audit_rate_threshold: float = 0.9

    def __post_init__(self):
        if self.meta_inputs not in ("probability", "logit"):
            raise ValueError("meta_inputs must be 'probability' or 'logit'")
        if self.tie_break not in arc.TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {arc.TIE_BREAKS}")


@dataclass
class EnsembleModel:
    vocabulary: FeatureVocabulary
    logistic: LogisticModel
    naive_bayes: NaiveBayesModel
    arc1: RuleSet
    arc2: RuleSet
    meta: LogisticModel
    window_days: int
    split_seed: int
    split_unit: str
    meta_inputs: str = "probability"
    audit: list = field(default_factory=list)

    def encode(self, items: Sequence[PreparedVisit]) -> sp.csr_matrix:
        vectors = [encode_visit(p.visit, p.context, self.vocabulary) for p in items]
        return to_csr(vectors, self.vocabulary.dimension)

    def base_scores(self, items: Sequence[PreparedVisit], X=None) -> np.ndarray:
        """(n, 4) base probabilities in the order LR, ARC1, ARC2, NB."""
        if X is None:
            X = self.encode(items)
        if X.shape[1] != self.logistic.dimension:
            raise ValueError("encoded dimension does not match the fitted models")
        return np.column_stack([
            predict_logistic_batch(self.logistic, X),
            arc.score_itemsets(self.arc1, (p.longitudinal for p in items)),
            arc.score_itemsets(self.arc2, (p.horizontal for p in items)),
            predict_naive_bayes_batch(self.naive_bayes, X),
        ])

    def meta_features(self, base: np.ndarray) -> np.ndarray:
        return meta_features(base, self.meta_inputs)

    def combine(self, base: np.ndarray) -> np.ndarray:
        return predict_logistic_batch(self.meta, self.meta_features(base))

    def score(self, items: Sequence[PreparedVisit]) -> np.ndarray:
        if not items:
            return np.zeros(0)
        return self.combine(self.base_scores(items))

    def score_columns(self, batch: "LabeledBatch"):
        base = self.base_scores(batch.items)
        columns = {name: base[:, k] for k, name in enumerate(BASE_NAMES)}
        columns["Ensemble"] = self.combine(base)
        return {c: columns[c] for c in COLUMNS}, batch.labels


@dataclass
class LabeledBatch:
    items: list[PreparedVisit]
    labels: np.ndarray


def meta_features(base: np.ndarray, mode: str = "probability") -> np.ndarray:
    if mode == "logit":
        return logit(np.clip(base, 1e-12, 1 - 1e-12))
    return np.asarray(base, dtype=np.float64)


@dataclass
class TrainingReport:
    window_days: int
    split_sizes: tuple[int, int, int] = (0, 0, 0)
    positives: tuple[int, int, int] = (0, 0, 0)
    split_unit: str = RECORD
    split_seed: int = 0
    patients_spanning_splits: int = 0
    stages: list[tuple[str, str]] = field(default_factory=list)
    arc_scores: dict[str, dict[int, float]] = field(default_factory=dict)
    thresholds: dict[str, int] = field(default_factory=dict)
    rule_counts: dict[str, int] = field(default_factory=dict)
    losses: dict[str, tuple[int, float]] = field(default_factory=dict)
    meta_weights: tuple[float, ...] = ()
    meta_intercept: float = 0.0
    validation_aucs: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            "# training report",
            f"window_days {self.window_days}",
            f"split_seed {self.split_seed}",
            f"split_unit {self.split_unit}",
            "split_sizes " + " ".join(map(str, self.split_sizes)),
            "split_positives " + " ".join(map(str, self.positives)),
            f"patients_spanning_splits {self.patients_spanning_splits}",
        ]
        if self.split_unit == RECORD and self.patients_spanning_splits:
            lines.append("warning record-level split places some patients in more than one subset")
        lines += [f"stage {name} consumed {subset}" for name, subset in self.stages]
        for name in sorted(self.arc_scores):
            for threshold, score in sorted(self.arc_scores[name].items()):
                lines.append(f"{name.lower()}_train_auc support {threshold} auc {score:.6f}")
        lines += [f"{name.lower()}_min_support {t}" for name, t in sorted(self.thresholds.items())]
        lines += [f"{name.lower()}_rules {n}" for name, n in sorted(self.rule_counts.items())]
        lines += [f"{name}_fit epochs {e} final_loss {float(loss)!r}" for name, (e, loss) in sorted(self.losses.items())]
        lines.append("meta_weights " + " ".join(repr(float(w)) for w in self.meta_weights))
        lines.append(f"meta_intercept {float(self.meta_intercept)!r}")
        lines += [f"validation_auc {name} {a:.6f}" for name, a in self.validation_aucs.items()]
        return "\n".join(lines) + "\n"


def _transactions(items, labels, attr):
    return [Transaction(getattr(p, attr), bool(y)) for p, y in zip(items, labels)]


def _fit_rules(name, transactions, fixed, config: EnsembleConfig, view, report):
    if fixed is not None:
        threshold = int(fixed)
    else:
        scores = arc.support_threshold_scores(
            transactions, config.support_grid, view, config.max_antecedent_len, config.tie_break
        )
        report.arc_scores[name] = scores
        threshold = max(scores, key=lambda s: (scores[s], s))
    ruleset = arc.build_ruleset(transactions, threshold, view, config.max_antecedent_len, config.tie_break)
    report.thresholds[name] = threshold
    report.rule_counts[name] = len(ruleset)
    return ruleset


def train_ensemble(items: Sequence[PreparedVisit], labels: Mapping[str, bool] | Sequence[bool],
                   split: SplitAssignment, window_days: int,
                   config: EnsembleConfig | None = None) -> tuple[EnsembleModel, TrainingReport]:
    """Fit the four base models on TRAIN and the combiner on VALIDATION."""
    config = config or EnsembleConfig()
    if isinstance(labels, Mapping):
        y_all = np.array([bool(labels[p.visit_id]) for p in items])
    else:
        y_all = np.asarray(labels, dtype=bool)
    if len(y_all) != len(items):
        raise ValueError("labels and items differ in length")
    subsets = {TRAIN: [], VALIDATION: [], TEST: []}
    for k, p in enumerate(items):
        subsets[split.assignment[p.visit_id]].append(k)
    if not subsets[TRAIN]:
        raise StageError("split", ValueError("empty training split"))
    if not subsets[VALIDATION]:
        raise StageError("split", ValueError("empty validation split"))

    report = TrainingReport(window_days, split_unit=split.unit, split_seed=split.seed)
    report.split_sizes = tuple(len(subsets[s]) for s in (TRAIN, VALIDATION, TEST))
    report.positives = tuple(int(y_all[subsets[s]].sum()) for s in (TRAIN, VALIDATION, TEST))
    spans = {}
    for p in items:
        spans.setdefault(p.visit.patient_key, set()).add(split.assignment[p.visit_id])
    report.patients_spanning_splits = sum(1 for s in spans.values() if len(s) > 1)

    train = [items[k] for k in subsets[TRAIN]]
    y_train = y_all[subsets[TRAIN]]
    valid = [items[k] for k in subsets[VALIDATION]]
    y_valid = y_all[subsets[VALIDATION]]

    try:
        vocab = build_vocabulary(((p.visit, p.context) for p in train), config.count_bins, TRAIN,
                                 config.excluded_fields)
    except Exception as exc:
        raise StageError("vocabulary", exc) from exc
    report.stages.append(("vocabulary", TRAIN))
    X_train = to_csr([encode_visit(p.visit, p.context, vocab) for p in train], vocab.dimension)

    try:
        lr = fit_logistic(X_train, y_train, config.logistic)
    except Exception as exc:
        raise StageError("logistic", exc) from exc
    report.stages.append(("logistic", TRAIN))
    report.losses["logistic"] = (len(lr.losses) - 1, lr.final_loss)

    try:
        nb = fit_naive_bayes(X_train, y_train, config.nb_alpha)
    except Exception as exc:
        raise StageError("naive_bayes", exc) from exc
    report.stages.append(("naive_bayes", TRAIN))

    try:
        arc1 = _fit_rules("ARC1", _transactions(train, y_train, "longitudinal"), config.arc1_support,
                          config, arc.LONGITUDINAL, report)
    except Exception as exc:
        raise StageError("arc1", exc) from exc
    report.stages.append(("arc1", TRAIN))
    try:
        arc2 = _fit_rules("ARC2", _transactions(train, y_train, "horizontal"), config.arc2_support,
                          config, arc.HORIZONTAL, report)
    except Exception as exc:
        raise StageError("arc2", exc) from exc
    report.stages.append(("arc2", TRAIN))

    audit = audit_feature_leakage(X_train, y_train, vocab, config.audit_min_count, config.audit_rate_threshold)
    report.stages.append(("audit", TRAIN))

    model = EnsembleModel(vocab, lr, nb, arc1, arc2, meta=None, window_days=window_days,
                          split_seed=split.seed, split_unit=split.unit,
                          meta_inputs=config.meta_inputs, audit=audit)
    base_valid = model.base_scores(valid)
    try:
        model.meta = fit_logistic(meta_features(base_valid, config.meta_inputs), y_valid, config.meta)
    except Exception as exc:
        raise StageError("meta", exc) from exc
    report.stages.append(("meta", VALIDATION))
    report.losses["meta"] = (len(model.meta.losses) - 1, model.meta.final_loss)
    report.meta_weights = tuple(float(w) for w in model.meta.weights)
    report.meta_intercept = float(model.meta.intercept)
    if 0 < y_valid.sum() < len(y_valid):
        combined = model.combine(base_valid)
        for k, name in enumerate(BASE_NAMES):
            report.validation_aucs[name] = auc(base_valid[:, k], y_valid)
        report.validation_aucs["Ensemble"] = auc(combined, y_valid)
    return model, report


def predict_ensemble(model: EnsembleModel, visit: VisitRecord, timeline: PatientTimeline) -> float:
    """Risk score for one ED visit given its patient's timeline."""
    return float(model.score([prepare_visit(visit, timeline)])[0])


def labels_for(items: Sequence[PreparedVisit], labeled: Iterable[LabeledIndexVisit]) -> np.ndarray:
    by_id = {x.visit.visit_id: x.label for x in labeled}
    return np.array([by_id[p.visit_id] for p in items], dtype=bool)


def subset_batch(items: Sequence[PreparedVisit], labels: np.ndarray, split: SplitAssignment,
                 subset: str) -> LabeledBatch:
    keep = [k for k, p in enumerate(items) if split.assignment[p.visit_id] == subset]
    return LabeledBatch([items[k] for k in keep], np.asarray(labels)[keep])
