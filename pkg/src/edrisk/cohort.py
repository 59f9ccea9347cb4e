"""Visit ingestion, patient linkage, cohort exclusions and readmission labels.

Records are read from delimiter-separated text.  Each row is one ED visit or
one inpatient stay; rows sharing a ``patient_key`` are linked into a timeline
ordered by the patient-relative day offset.
"""

from __future__ import annotations

import csv
import enum
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

WINDOWS = (3, 7, 14)
PREGNANCY_CCS = (177, 196)
MENTAL_HEALTH_CCS = (650, 670)
MIN_ADULT_AGE = 18
MAX_SECONDARY = 20
MAX_PROCEDURE = 21

REQUIRED_FIELDS = (
    "visit_id",
    "patient_key",
    "days_to_event",
    "visit_type",
    "age",
    "sex",
    "admission_month",
    "primary_ccs",
)
OPTIONAL_FIELDS = ("race", "length_of_stay", "disposition", "facility_id")
EXCLUSION_REASONS = ("missing_patient_key", "pregnancy", "under_18")


class CohortError(Exception):
    """Base class for cohort construction errors."""


class SchemaError(CohortError):
    pass


class RowParseError(CohortError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateVisitError(CohortError):
    pass


class ContractError(CohortError):
    pass


class VisitType(str, enum.Enum):
    ED = "ED"
    INPATIENT = "INPATIENT"


@dataclass(frozen=True)
class VisitRecord:
    visit_id: str
    patient_key: str
    days_to_event: int
    visit_type: VisitType
    age: int
    sex: str
    admission_month: int
    primary_ccs: int
    race: str = ""
    length_of_stay: int = 0
    disposition: str = ""
    facility_id: str = ""
    secondary_ccs: tuple[int, ...] = ()
    procedure_ccs: tuple[int, ...] = ()
    extra_categoricals: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.days_to_event < 0:
            raise ValueError(f"visit {self.visit_id}: negative days_to_event")
        if not 1 <= self.admission_month <= 12:
            raise ValueError(f"visit {self.visit_id}: admission_month out of range")
        if len(self.secondary_ccs) > MAX_SECONDARY:
            raise ValueError(f"visit {self.visit_id}: more than {MAX_SECONDARY} secondary codes")
        if len(self.procedure_ccs) > MAX_PROCEDURE:
            raise ValueError(f"visit {self.visit_id}: more than {MAX_PROCEDURE} procedure codes")
        codes = (self.primary_ccs,) + self.secondary_ccs + self.procedure_ccs
        if any(c <= 0 for c in codes):
            raise ValueError(f"visit {self.visit_id}: CCS codes must be positive")

    @property
    def is_ed(self) -> bool:
        return self.visit_type is VisitType.ED

    @property
    def extras(self) -> dict[str, str]:
        return dict(self.extra_categoricals)


@dataclass(frozen=True)
class PatientTimeline:
    patient_key: str
    visits: tuple[VisitRecord, ...]

    def index_of(self, visit: VisitRecord) -> int:
        for i, v in enumerate(self.visits):
            if v.visit_id == visit.visit_id:
                return i
        raise ContractError(f"visit {visit.visit_id} is not in timeline {self.patient_key}")


@dataclass(frozen=True)
class LabeledIndexVisit:
    visit: VisitRecord
    window_days: int
    label: bool
    qualifying_admission_id: str | None = None


@dataclass
class ExclusionReport:
    counts: dict[str, int] = field(default_factory=lambda: {r: 0 for r in EXCLUSION_REASONS})
    input_total: int = 0
    output_total: int = 0

    def to_text(self) -> str:
        lines = [f"{reason} {self.counts[reason]}" for reason in EXCLUSION_REASONS]
        lines.append(f"none {self.output_total}")
        lines.append(f"input_total {self.input_total}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExclusionReport":
        values = dict(line.split() for line in text.splitlines() if line.strip())
        report = cls()
        for reason in EXCLUSION_REASONS:
            report.counts[reason] = int(values[reason])
        report.output_total = int(values["none"])
        report.input_total = int(values["input_total"])
        return report


def default_schema() -> dict[str, str]:
    """Identity mapping from logical field names to column names."""
    return {name: name for name in REQUIRED_FIELDS + OPTIONAL_FIELDS}


def _parse_int(text: str, row: int, name: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise RowParseError(row, f"{name} is not an integer: {text!r}") from None


def ingest_visits(
    source: TextIO | str,
    schema: Mapping[str, str] | None = None,
    delimiter: str = ",",
) -> list[VisitRecord]:
    """Parse visit rows from delimited text into VisitRecords.

    ``schema`` maps logical field names to column names; unmapped logical
    fields default to their own name.  Columns not consumed by a logical
    field (or by the ``secondary_ccs_<i>`` / ``procedure_ccs_<i>`` slots) are
    kept in ``extra_categoricals``.  Row numbers in errors count data rows
    from 1 (the header is not counted).
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    mapping = default_schema()
    if schema:
        mapping.update(schema)
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("input has no header row") from None
    col = {name: i for i, name in enumerate(header)}
    for name in REQUIRED_FIELDS:
        if mapping[name] not in col:
            raise SchemaError(f"missing required column {mapping[name]!r}")

    sec_cols = [col[f"secondary_ccs_{i}"] for i in range(1, MAX_SECONDARY + 1) if f"secondary_ccs_{i}" in col]
    proc_cols = [col[f"procedure_ccs_{i}"] for i in range(1, MAX_PROCEDURE + 1) if f"procedure_ccs_{i}" in col]
    used = {col[mapping[n]] for n in REQUIRED_FIELDS + OPTIONAL_FIELDS if mapping[n] in col}
    used.update(sec_cols, proc_cols)
    extra_cols = [(header[i], i) for i in range(len(header)) if i not in used]

    visits = []
    seen = set()
    for rowno, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise RowParseError(rowno, f"expected {len(header)} fields, got {len(row)}")

        def get(name, default=""):
            c = mapping.get(name)
            return row[col[c]].strip() if c in col else default

        visit_id = get("visit_id")
        if not visit_id:
            raise RowParseError(rowno, "empty visit_id")
        if visit_id in seen:
            raise DuplicateVisitError(f"duplicate visit_id {visit_id!r} at row {rowno}")
        seen.add(visit_id)
        vtype = get("visit_type").upper()
        try:
            visit_type = VisitType(vtype)
        except ValueError:
            raise RowParseError(rowno, f"unknown visit_type {vtype!r}") from None
        los = get("length_of_stay")
        try:
            visit = VisitRecord(
                visit_id=visit_id,
                patient_key=get("patient_key"),
                days_to_event=_parse_int(get("days_to_event"), rowno, "days_to_event"),
                visit_type=visit_type,
                age=_parse_int(get("age"), rowno, "age"),
                sex=get("sex"),
                admission_month=_parse_int(get("admission_month"), rowno, "admission_month"),
                primary_ccs=_parse_int(get("primary_ccs"), rowno, "primary_ccs"),
                race=get("race"),
                length_of_stay=_parse_int(los, rowno, "length_of_stay") if los else 0,
                disposition=get("disposition"),
                facility_id=get("facility_id"),
                secondary_ccs=tuple(
                    _parse_int(row[i], rowno, header[i]) for i in sec_cols if row[i].strip()
                ),
                procedure_ccs=tuple(
                    _parse_int(row[i], rowno, header[i]) for i in proc_cols if row[i].strip()
                ),
                extra_categoricals=tuple(
                    (name, row[i].strip()) for name, i in extra_cols if row[i].strip()
                ),
            )
        except ValueError as exc:
            raise RowParseError(rowno, str(exc)) from None
        visits.append(visit)
    return visits


def write_visits(visits: Iterable[VisitRecord], out: TextIO, delimiter: str = ",") -> None:
    """Write visits in the format read by :func:`ingest_visits`."""
    visits = list(visits)
    extra_names = sorted({name for v in visits for name, _ in v.extra_categoricals})
    header = list(REQUIRED_FIELDS + OPTIONAL_FIELDS)
    header += [f"secondary_ccs_{i}" for i in range(1, MAX_SECONDARY + 1)]
    header += [f"procedure_ccs_{i}" for i in range(1, MAX_PROCEDURE + 1)]
    header += extra_names
    writer = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    writer.writerow(header)
    for v in visits:
        extras = v.extras
        row = [
            v.visit_id, v.patient_key, v.days_to_event, v.visit_type.value, v.age, v.sex,
            v.admission_month, v.primary_ccs, v.race, v.length_of_stay, v.disposition,
            v.facility_id,
        ]
        row += list(v.secondary_ccs) + [""] * (MAX_SECONDARY - len(v.secondary_ccs))
        row += list(v.procedure_ccs) + [""] * (MAX_PROCEDURE - len(v.procedure_ccs))
        row += [extras.get(name, "") for name in extra_names]
        writer.writerow(row)


def visit_sort_key(v: VisitRecord):
    return (v.days_to_event, v.visit_id)


def link_patient_timelines(visits: Iterable[VisitRecord]) -> dict[str, PatientTimeline]:
    """Group visits by patient key, each group sorted by (day, visit_id)."""
    groups: dict[str, list[VisitRecord]] = defaultdict(list)
    for v in visits:
        if not v.patient_key:
            raise ContractError(f"visit {v.visit_id} has an empty patient_key; apply exclusions first")
        groups[v.patient_key].append(v)
    return {
        key: PatientTimeline(key, tuple(sorted(group, key=visit_sort_key)))
        for key, group in sorted(groups.items())
    }


def _in_range(code: int, bounds: tuple[int, int]) -> bool:
    return bounds[0] <= code <= bounds[1]


def apply_exclusions(visits: Iterable[VisitRecord]) -> tuple[list[VisitRecord], ExclusionReport]:
    """Remove unlinkable, pregnancy-related and under-age records.

    Reasons are tested in order: missing patient key, pregnancy (every record
    of a patient with any primary CCS in 177-196), then age under 18.
    """
    visits = list(visits)
    report = ExclusionReport(input_total=len(visits))
    pregnant = {
        v.patient_key for v in visits if v.patient_key and _in_range(v.primary_ccs, PREGNANCY_CCS)
    }
    kept = []
    for v in visits:
        if not v.patient_key:
            report.counts["missing_patient_key"] += 1
        elif v.patient_key in pregnant:
            report.counts["pregnancy"] += 1
        elif v.age < MIN_ADULT_AGE:
            report.counts["under_18"] += 1
        else:
            kept.append(v)
    report.output_total = len(kept)
    return kept, report


def check_window(window_days: int) -> int:
    if window_days not in WINDOWS:
        raise ValueError(f"window must be one of {WINDOWS}, got {window_days!r}")
    return window_days


def qualifies(admission: VisitRecord) -> bool:
    return admission.visit_type is VisitType.INPATIENT and not _in_range(
        admission.primary_ccs, MENTAL_HEALTH_CCS
    )


def label_timeline(timeline: PatientTimeline, window_days: int) -> list[LabeledIndexVisit]:
    check_window(window_days)
    admissions = [v for v in timeline.visits if qualifies(v)]
    out = []
    for v in timeline.visits:
        if not v.is_ed:
            continue
        hit = None
        # admissions are sorted by (day, visit_id), so the first hit is the tie-break winner
        for a in admissions:
            delta = a.days_to_event - v.days_to_event
            if delta > window_days:
                break
            if delta >= 0:
                hit = a
                break
        out.append(LabeledIndexVisit(v, window_days, hit is not None, hit.visit_id if hit else None))
    return out


def label_index_visits(
    timelines: Mapping[str, PatientTimeline] | Iterable[PatientTimeline], window_days: int
) -> list[LabeledIndexVisit]:
    """Label every ED visit by whether a qualifying admission follows within the window."""
    check_window(window_days)
    if isinstance(timelines, Mapping):
        timelines = timelines.values()
    out = []
    for tl in sorted(timelines, key=lambda t: t.patient_key):
        out.extend(label_timeline(tl, window_days))
    return out
