"""Binary feature space and itemset views for index visits.

Every categorical (field, value) pair observed in the training split gets one
column.  Diagnosis codes are position-free: each code on the visit sets a
``dx_any`` column and the primary code additionally sets ``dx_primary``.
Counts from the 30-day lookback are binned before dummy coding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence
from urllib.parse import quote, unquote

import numpy as np
import scipy.sparse as sp

from .cohort import ContractError, PatientTimeline, VisitRecord, VisitType

LOOKBACK_DAYS = 30
DEFAULT_COUNT_BINS = (0, 1, 2, 3, 4, 5)
DEFAULT_EXCLUDED_FIELDS = ("totchg", "charges", "total_charges")

COUNT_FIELDS = (
    "ctx.ed_30d",
    "ctx.ed_same_facility_30d",
    "ctx.hosp_30d",
    "ctx.hosp_same_facility_30d",
    "ctx.same_primary_30d",
)
MULTI_VALUED_FIELDS = frozenset({"dx_any", "px_any"})


@dataclass(frozen=True)
class TemporalContext:
    ed_visits_30d: int = 0
    ed_visits_same_facility_30d: int = 0
    hosp_visits_30d: int = 0
    hosp_visits_same_facility_30d: int = 0
    same_primary_ccs_visits_30d: int = 0
    most_frequent_primary_ccs_30d: int | None = None

    def counts(self) -> tuple[int, ...]:
        return (
            self.ed_visits_30d,
            self.ed_visits_same_facility_30d,
            self.hosp_visits_30d,
            self.hosp_visits_same_facility_30d,
            self.same_primary_ccs_visits_30d,
        )


EMPTY_CONTEXT = TemporalContext()


@dataclass(frozen=True)
class FeatureVector:
    active: tuple[int, ...]
    dimension: int

    def __post_init__(self):
        if any(i >= self.dimension or i < 0 for i in self.active):
            raise ValueError("active index outside the feature dimension")


class FeatureVocabulary:
    """Ordered mapping from (field, value) pairs to column indices."""

    def __init__(self, entries: Sequence[tuple[str, str]], count_bins=DEFAULT_COUNT_BINS,
                 built_from: str = "TRAIN", excluded_fields=DEFAULT_EXCLUDED_FIELDS):
        self.entries = list(entries)
        self.index = {pair: i for i, pair in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise ValueError("duplicate vocabulary entries")
        self.count_bins = tuple(int(b) for b in count_bins)
        self.built_from = built_from
        self.excluded_fields = tuple(excluded_fields)

    def __len__(self):
        return len(self.entries)

    @property
    def dimension(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureVocabulary)
            and self.entries == other.entries
            and self.count_bins == other.count_bins
            and self.built_from == other.built_from
            and self.excluded_fields == other.excluded_fields
        )

    def group(self, field: str) -> list[int]:
        return [i for i, (f, _) in enumerate(self.entries) if f == field]

    def to_text(self) -> str:
        lines = [
            "# vocabulary",
            "# count_bins " + " ".join(str(b) for b in self.count_bins),
            "# excluded_fields " + " ".join(quote(f, safe="") for f in self.excluded_fields),
            f"# built_from {self.built_from}",
            f"# dimension {self.dimension}",
        ]
        for i, (field, value) in enumerate(self.entries):
            lines.append(f"{i} {quote(field, safe='')} {quote(value, safe='')}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeatureVocabulary":
        header = {}
        entries = []
        for line in text.splitlines():
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 1:
                    header[parts[0]] = parts[1:]
                continue
            if not line.strip():
                continue
            idx, field, value = line.split(" ")
            if int(idx) != len(entries):
                raise ValueError(f"vocabulary index gap at {idx}")
            entries.append((unquote(field), unquote(value)))
        vocab = cls(
            entries,
            count_bins=[int(b) for b in header["count_bins"]],
            built_from=header["built_from"][0],
            excluded_fields=[unquote(f) for f in header.get("excluded_fields", [])],
        )
        if int(header["dimension"][0]) != vocab.dimension:
            raise ValueError("vocabulary dimension does not match its entries")
        return vocab


def lookback_visits(timeline: PatientTimeline, index_visit: VisitRecord,
                    days: int = LOOKBACK_DAYS) -> list[VisitRecord]:
    """Visits 1..days before the index visit; same-day visits are excluded."""
    timeline.index_of(index_visit)
    d0 = index_visit.days_to_event
    return [v for v in timeline.visits if 1 <= d0 - v.days_to_event <= days]


def compute_temporal_context(timeline: PatientTimeline, index_visit: VisitRecord) -> TemporalContext:
    prior = lookback_visits(timeline, index_visit)
    fac = index_visit.facility_id
    ed = [v for v in prior if v.visit_type is VisitType.ED]
    hosp = [v for v in prior if v.visit_type is VisitType.INPATIENT]
    modal = None
    if prior:
        freq = Counter(v.primary_ccs for v in prior)
        modal = min(freq, key=lambda code: (-freq[code], code))
    return TemporalContext(
        ed_visits_30d=len(ed),
        ed_visits_same_facility_30d=sum(1 for v in ed if fac and v.facility_id == fac),
        hosp_visits_30d=len(hosp),
        hosp_visits_same_facility_30d=sum(1 for v in hosp if fac and v.facility_id == fac),
        same_primary_ccs_visits_30d=sum(1 for v in prior if v.primary_ccs == index_visit.primary_ccs),
        most_frequent_primary_ccs_30d=modal,
    )


def extract_longitudinal_itemset(timeline: PatientTimeline, index_visit: VisitRecord) -> frozenset[int]:
    return frozenset(v.primary_ccs for v in lookback_visits(timeline, index_visit))


def extract_horizontal_itemset(visit: VisitRecord) -> frozenset[int]:
    return frozenset((visit.primary_ccs,) + visit.secondary_ccs)


def bin_count(count: int, bins: Sequence[int] = DEFAULT_COUNT_BINS) -> str:
    if count < bins[0]:
        raise ValueError(f"count {count} below the first bin edge")
    label = bins[0]
    for edge in bins:
        if count >= edge:
            label = edge
    return f"{label}+" if label == bins[-1] else str(label)


def visit_pairs(visit: VisitRecord, context: TemporalContext, count_bins=DEFAULT_COUNT_BINS,
                excluded_fields=DEFAULT_EXCLUDED_FIELDS) -> list[tuple[str, str]]:
    """All (field, value) pairs a visit and its context present to the encoder."""
    pairs = [
        ("age", str(visit.age)),
        ("sex", visit.sex),
        ("race", visit.race),
        ("admission_month", str(visit.admission_month)),
        ("disposition", visit.disposition),
        ("length_of_stay", str(visit.length_of_stay)),
        ("dx_primary", str(visit.primary_ccs)),
    ]
    excluded = set(excluded_fields)
    pairs += [("x." + name, value) for name, value in visit.extra_categoricals if name not in excluded]
    pairs += [("dx_any", str(c)) for c in sorted(extract_horizontal_itemset(visit))]
    pairs += [("px_any", str(c)) for c in sorted(set(visit.procedure_ccs))]
    pairs += [(name, bin_count(n, count_bins)) for name, n in zip(COUNT_FIELDS, context.counts())]
    if context.most_frequent_primary_ccs_30d is not None:
        pairs.append(("ctx.modal_primary_30d", str(context.most_frequent_primary_ccs_30d)))
    return [(f, v) for f, v in pairs if v != ""]


def _value_key(value: str):
    return (0, int(value), "") if value.lstrip("-").isdigit() else (1, 0, value)


def build_vocabulary(rows: Iterable[tuple[VisitRecord, TemporalContext]],
                     count_bins=DEFAULT_COUNT_BINS, built_from: str = "TRAIN",
                     excluded_fields=DEFAULT_EXCLUDED_FIELDS) -> FeatureVocabulary:
    """Collect every observed (field, value) pair from training rows.

    Entries are ordered by field name, then by value (numerically where the
    value is an integer).
    """
    seen = set()
    n = 0
    for visit, context in rows:
        n += 1
        seen.update(visit_pairs(visit, context, count_bins, excluded_fields))
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty training set")
    entries = sorted(seen, key=lambda p: (p[0], _value_key(p[1])))
    return FeatureVocabulary(entries, count_bins, built_from, excluded_fields)


def encode_visit(visit: VisitRecord, context: TemporalContext, vocab: FeatureVocabulary) -> FeatureVector:
    pairs = visit_pairs(visit, context, vocab.count_bins, vocab.excluded_fields)
    active = sorted({vocab.index[p] for p in pairs if p in vocab.index})
    return FeatureVector(tuple(active), vocab.dimension)


def decode_vector(vector: FeatureVector, vocab: FeatureVocabulary) -> list[tuple[str, str]]:
    return [vocab.entries[i] for i in vector.active]


def to_csr(vectors: Sequence[FeatureVector], dimension: int | None = None) -> sp.csr_matrix:
    """Stack feature vectors into a binary CSR matrix."""
    if dimension is None:
        if not vectors:
            raise ValueError("dimension required for an empty batch")
        dimension = vectors[0].dimension
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dimension != dimension:
            raise ValueError(f"vector {i} has dimension {v.dimension}, expected {dimension}")
        indptr[i + 1] = indptr[i] + len(v.active)
    indices = np.fromiter((j for v in vectors for j in v.active), dtype=np.int64, count=int(indptr[-1]))
    data = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dimension))
