import itertools

import pytest

from edrisk.arc import Transaction
from edrisk.cohort import VisitRecord, VisitType

_ids = itertools.count()


def make_visit(day=0, kind="ED", patient="P1", primary=50, secondary=(), procedures=(), age=40,
               visit_id=None, facility="F1", month=1, **kw):
    return VisitRecord(
        visit_id=visit_id or f"v{next(_ids):06d}",
        patient_key=patient,
        days_to_event=day,
        visit_type=VisitType(kind),
        age=age,
        sex=kw.pop("sex", "F"),
        admission_month=month,
        primary_ccs=primary,
        facility_id=facility,
        secondary_ccs=tuple(secondary),
        procedure_ccs=tuple(procedures),
        **kw,
    )


@pytest.fixture
def visit():
    return make_visit


# the seven-record worked example: items per record and outcome
WORKED_EXAMPLE = [
    ({"A"}, False),
    ({"B", "C"}, False),
    ({"A", "B", "D"}, True),
    ({"B", "E"}, True),
    ({"B", "A"}, True),
    ({"C", "B"}, False),
    ({"B", "A", "C"}, False),
]


@pytest.fixture
def worked_transactions():
    return [Transaction(frozenset(items), y) for items, y in WORKED_EXAMPLE]


# acceptance criteria report: one line per criterion in the terminal summary
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marks = getattr(report, "criterion", None)
    if marks:
        n, title = marks
        _CRITERIA.setdefault(n, [title, True])
        if not report.passed:
            _CRITERIA[n][1] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")


def synthetic_items(n_patients=3000, seed=0, window=14, **synth_kwargs):
    """Prepared index visits, labels and split for a small synthetic cohort."""
    from edrisk.cohort import apply_exclusions, label_index_visits, link_patient_timelines
    from edrisk.stack import labels_for, prepare_index_visits, split_dataset
    from edrisk.synth import SynthConfig, generate_synthetic_cohort

    visits = generate_synthetic_cohort(SynthConfig(n_patients=n_patients, seed=seed, **synth_kwargs))
    kept, _ = apply_exclusions(visits)
    timelines = link_patient_timelines(kept)
    items = prepare_index_visits(timelines)
    labels = labels_for(items, label_index_visits(timelines, window))
    return timelines, items, labels, split_dataset(items, seed)


@pytest.fixture(scope="session")
def small_run():
    from edrisk.stack import train_ensemble

    timelines, items, labels, split = synthetic_items()
    model, report = train_ensemble(items, labels, split, 14)
    return timelines, items, labels, split, model, report
