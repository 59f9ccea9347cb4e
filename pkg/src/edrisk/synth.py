"""Deterministic synthetic ED/inpatient cohorts with planted associations.

Each patient is generated from its own random stream keyed by
``(seed, patient_index, stage)``, so output does not depend on generation
order.  Admissions are only ever created by the generator's admission draw:
background inpatient stays that would land inside some ED visit's 14-day
forward window are coded as mental-health stays, which never qualify.

Planted rule codes are reserved: they never occur in background draws, so the
visits matching a planted itemset are exactly the ones the generator put
there (plus any later visit whose lookback happens to cover a longitudinal
plant, which is accounted for when assigning probabilities).  Each plant of
two or more codes also gets near-miss copies with one code swapped for a
background code; these are scored like background visits, so a rule miner
has to find the full itemset rather than any of its subsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import (
    MENTAL_HEALTH_CCS,
    MIN_ADULT_AGE,
    PREGNANCY_CCS,
    VisitRecord,
    VisitType,
)

LONGITUDINAL = "LONGITUDINAL"
HORIZONTAL = "HORIZONTAL"
HORIZON_DAYS = 365
LABEL_WINDOW = 14
LOOKBACK = 30
N_PROCEDURE_CODES = 231


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedRule:
    itemset: tuple[int, ...]
    placement: str
    confidence: float
    rate: float = 0.016  # fraction of eligible patients receiving the plant
    decoy_rate: float = 0.016  # fraction receiving a near miss (one code swapped)

    def __post_init__(self):
        object.__setattr__(self, "itemset", tuple(sorted(set(self.itemset))))
        if self.placement not in (LONGITUDINAL, HORIZONTAL):
            raise SynthConfigError(f"unknown placement {self.placement!r}")
        if not 0 < self.confidence < 1:
            raise SynthConfigError("planted confidence must lie in (0, 1)")
        if not (0 <= self.rate <= 1 and 0 <= self.decoy_rate <= 1):
            raise SynthConfigError("plant and decoy rates must lie in [0, 1]")
        if not self.itemset:
            raise SynthConfigError("planted itemset is empty")


# antecedents and confidences from the published top-rule tables
DEFAULT_PLANTS = (
    PlantedRule((50, 141, 250, 251), LONGITUDINAL, 0.72),
    PlantedRule((2, 237), HORIZONTAL, 0.54),
    PlantedRule((49, 248), HORIZONTAL, 0.42),
)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 33000
    visits_per_patient_mean: float = 3.0
    positive_rate_target: float = 0.02
    planted_rules: tuple[PlantedRule, ...] = DEFAULT_PLANTS
    ccs_vocabulary_size: int = 260
    seed: int = 0
    inpatient_fraction: float = 0.1
    child_fraction: float = 0.02
    pregnancy_fraction: float = 0.02
    missing_key_fraction: float = 0.01
    n_facilities: int = 40
    code_zipf_exponent: float = 1.2
    code_risk_sd: float = 0.8
    prior_visit_effect: float = 0.9
    background_cap: float = 0.5
    leakage_procedure_ccs: int = 137
    leakage_capture: float = 0.1
    leakage_purity: float = 0.98
    secondary_weight: float = 1.0
    lookback_weight: float = 0.3
    secondary_mean: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "planted_rules", tuple(self.planted_rules))
        if self.n_patients < 0:
            raise SynthConfigError("n_patients must be nonnegative")
        if self.secondary_mean < 0 or self.secondary_weight < 0 or self.lookback_weight < 0:
            raise SynthConfigError("secondary_mean and risk weights must be nonnegative")
        if self.visits_per_patient_mean < 1:
            raise SynthConfigError("visits_per_patient_mean must be at least 1")
        if not 0 < self.positive_rate_target < 1:
            raise SynthConfigError("positive_rate_target must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise SynthConfigError("seed must be a 64-bit unsigned integer")
        for rule in self.planted_rules:
            if max(rule.itemset) > self.ccs_vocabulary_size or min(rule.itemset) < 1:
                raise SynthConfigError(f"planted codes {rule.itemset} outside the vocabulary")
            if any(PREGNANCY_CCS[0] <= c <= PREGNANCY_CCS[1] for c in rule.itemset):
                raise SynthConfigError("planted codes may not be pregnancy codes")
        if len(self.background_codes()) < 10:
            raise SynthConfigError("vocabulary too small after reserving planted codes")
        if not 1 <= self.leakage_procedure_ccs <= N_PROCEDURE_CODES:
            raise SynthConfigError("leakage procedure code outside 1..231")
        if not 0 < self.leakage_purity <= 1 or not 0 <= self.leakage_capture <= 1:
            raise SynthConfigError("leakage capture/purity out of range")

    def reserved_codes(self) -> set[int]:
        return {c for rule in self.planted_rules for c in rule.itemset}

    def background_codes(self) -> list[int]:
        reserved = self.reserved_codes()
        return [
            c for c in range(1, self.ccs_vocabulary_size + 1)
            if c not in reserved and not PREGNANCY_CCS[0] <= c <= PREGNANCY_CCS[1]
        ]


@dataclass
class PlantManifest:
    planted_rules: tuple[PlantedRule, ...]
    positive_rate_target: float
    background_scale: float
    expected_positive_rate: float
    retained_ed_visits: int
    total_visits: int
    expected_exclusions: dict[str, int] = field(default_factory=dict)
    plant_matches: list[int] = field(default_factory=list)
    leakage_procedure_ccs: int = 0

    def to_text(self) -> str:
        lines = [
            "# synthetic cohort manifest",
            f"positive_rate_target {self.positive_rate_target!r}",
            f"expected_positive_rate {self.expected_positive_rate:.6f}",
            f"background_scale {self.background_scale!r}",
            f"total_visits {self.total_visits}",
            f"retained_ed_visits {self.retained_ed_visits}",
            f"leakage_procedure_ccs {self.leakage_procedure_ccs}",
        ]
        for reason, n in self.expected_exclusions.items():
            lines.append(f"exclusion {reason} {n}")
        for rule, m in zip(self.planted_rules, self.plant_matches):
            codes = ",".join(map(str, rule.itemset))
            lines.append(f"plant {rule.placement} {codes} confidence {rule.confidence!r} matches {m}")
        return "\n".join(lines) + "\n"


# per-visit scratch record used during generation
@dataclass
class _Visit:
    day: int
    ed: bool
    primary: int
    secondary: list
    procedures: list
    facility: int
    los: int = 0
    planted_p: float = 0.0
    risk: float = 0.0
    admit_p: float = 0.0
    admitted: bool = False
    positive: bool = False


@dataclass
class _Patient:
    index: int
    kind: str  # "adult", "child" or "pregnant"
    age: int
    sex: str
    race: str
    payer: str
    visits: list


def _rng(config: SynthConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *key])


def _delay_pmf() -> np.ndarray:
    q = np.exp(-np.arange(LABEL_WINDOW + 1) / 6.0)
    return q / q.sum()


class _CodeSampler:
    def __init__(self, config: SynthConfig):
        rng = _rng(config, 2**32, 0)
        self.codes = np.array(config.background_codes())
        ranks = rng.permutation(len(self.codes)) + 1
        w = ranks.astype(float) ** -config.code_zipf_exponent
        self.p = w / w.sum()
        self.cdf = np.cumsum(self.p)
        self.cdf[-1] = 1.0
        self.risk = dict(zip(self.codes.tolist(), rng.normal(0.0, config.code_risk_sd, len(self.codes))))
        mental = np.arange(MENTAL_HEALTH_CCS[0], MENTAL_HEALTH_CCS[1] + 1)
        self.mental = mental
        proc = [c for c in range(1, N_PROCEDURE_CODES + 1) if c != config.leakage_procedure_ccs]
        self.procedures = np.array(proc)
        pw = (rng.permutation(len(proc)) + 1).astype(float) ** -1.0
        self.proc_cdf = np.cumsum(pw / pw.sum())
        self.proc_cdf[-1] = 1.0

    def draw(self, rng, n=None):
        idx = np.searchsorted(self.cdf, rng.random(n), side="right")
        return self.codes[idx] if n is not None else int(self.codes[idx])

    def draw_procedure(self, rng):
        return int(self.procedures[np.searchsorted(self.proc_cdf, rng.random(), side="right")])


def _background_visit(rng, sampler: _CodeSampler, day: int, ed: bool, home: int,
                      chronic: list, config: SynthConfig) -> _Visit:
    if chronic and rng.random() < 0.4:
        primary = chronic[rng.integers(len(chronic))]
    else:
        primary = sampler.draw(rng)
    secondary = []
    for _ in range(min(int(rng.poisson(config.secondary_mean)), 19)):
        code = sampler.draw(rng)
        if code != primary and code not in secondary:
            secondary.append(int(code))
    for code in chronic:
        if code != primary and code not in secondary and rng.random() < 0.3:
            secondary.append(code)
    procedures = []
    for _ in range(min(int(rng.poisson(0.6 if ed else 1.5)), 20)):
        p = sampler.draw_procedure(rng)
        if p not in procedures:
            procedures.append(p)
    facility = home if rng.random() < 0.8 else int(rng.integers(1, config.n_facilities + 1))
    los = 0 if ed else 1 + int(rng.geometric(0.3))
    return _Visit(day, ed, int(primary), secondary[:20], procedures, facility, los)


def _inject(rng, sampler, codes, placement, home, chronic, config, visits) -> None:
    if placement == HORIZONTAL:
        day = int(rng.integers(0, HORIZON_DAYS))
        v = _background_visit(rng, sampler, day, True, home, [], config)
        v.primary, v.secondary = codes[0], codes[1:]
        visits.append(v)
        return
    index_day = int(rng.integers(LOOKBACK, HORIZON_DAYS))
    offsets = sorted(rng.choice(np.arange(1, LOOKBACK + 1), size=len(codes), replace=False))
    for code, off in zip(codes, offsets[::-1]):
        v = _background_visit(rng, sampler, index_day - int(off), True, home, chronic, config)
        v.primary = code
        v.secondary = [c for c in v.secondary if c != code]
        visits.append(v)
    visits.append(_background_visit(rng, sampler, index_day, True, home, chronic, config))


def _make_patient(config: SynthConfig, sampler: _CodeSampler, i: int) -> _Patient:
    rng = _rng(config, i, 0)
    u = rng.random()
    if u < config.child_fraction:
        kind = "child"
    elif u < config.child_fraction + config.pregnancy_fraction:
        kind = "pregnant"
    else:
        kind = "adult"
    if kind == "child":
        age = int(rng.integers(1, MIN_ADULT_AGE))
    elif kind == "pregnant":
        age = int(rng.integers(MIN_ADULT_AGE, 45))
    else:
        age = int(min(MIN_ADULT_AGE + rng.gamma(3.0, 12.0), 100))
    sex = "F" if kind == "pregnant" or rng.random() < 0.52 else "M"
    race = str(1 + int(rng.choice(6, p=[0.45, 0.1, 0.3, 0.1, 0.02, 0.03])))
    if age >= 65:
        payer = "medicare"
    else:
        payer = ("medicaid", "private", "self_pay", "other")[int(rng.choice(4, p=[0.3, 0.5, 0.15, 0.05]))]
    home = int(min(rng.zipf(1.5), config.n_facilities))
    chronic = [int(c) for c in sampler.draw(rng, int(rng.integers(0, 3)))]

    n = int(rng.geometric(1.0 / config.visits_per_patient_mean))
    visits = []
    for _ in range(n):
        day = int(rng.integers(0, HORIZON_DAYS))
        ed = rng.random() >= config.inpatient_fraction
        visits.append(_background_visit(rng, sampler, day, ed, home, chronic, config))

    if kind == "adult":
        for rule in config.planted_rules:
            if rng.random() < rule.rate:
                codes = [int(c) for c in rng.permutation(rule.itemset)]
                _inject(rng, sampler, codes, rule.placement, home, chronic, config, visits)
            # a near miss: one planted code swapped for a background code
            if len(rule.itemset) > 1 and rng.random() < rule.decoy_rate:
                codes = [int(c) for c in rng.permutation(rule.itemset)][:-1]
                codes.insert(int(rng.integers(len(codes) + 1)), sampler.draw(rng))
                _inject(rng, sampler, codes, rule.placement, home, chronic, config, visits)

    if kind == "pregnant" and visits:
        v = visits[int(rng.integers(len(visits)))]
        v.primary = int(rng.integers(PREGNANCY_CCS[0], PREGNANCY_CCS[1] + 1))
        v.secondary = [c for c in v.secondary if c != v.primary]

    visits.sort(key=lambda v: v.day)
    ed_days = [v.day for v in visits if v.ed]
    for v in visits:
        if v.ed or v.primary in range(PREGNANCY_CCS[0], PREGNANCY_CCS[1] + 1):
            continue
        if any(0 <= v.day - d <= LABEL_WINDOW for d in ed_days):
            v.primary = int(rng.choice(sampler.mental))
            v.secondary = [c for c in v.secondary if c != v.primary]
    return _Patient(i, kind, age, sex, race, payer, visits)


def _score_visits(patient: _Patient, config: SynthConfig, sampler: _CodeSampler) -> None:
    """Planted probability (noisy-OR over matched plants) and background risk weight."""
    visits = patient.visits
    for v in visits:
        if not v.ed:
            continue
        prior = [u for u in visits if 1 <= v.day - u.day <= LOOKBACK]
        lookback = {u.primary for u in prior}
        horizontal = {v.primary, *v.secondary}
        miss = 1.0
        for rule in config.planted_rules:
            target = lookback if rule.placement == LONGITUDINAL else horizontal
            if target.issuperset(rule.itemset):
                miss *= 1.0 - rule.confidence
        v.planted_p = 1.0 - miss
        risk = sampler.risk
        eta = config.prior_visit_effect * min(len(prior), 3)
        eta += risk.get(v.primary, 0.0) + config.secondary_weight * sum(risk.get(c, 0.0) for c in v.secondary)
        eta += config.lookback_weight * sum(risk.get(c, 0.0) for c in lookback)
        eta += 0.15 * (patient.age - 50) / 10.0
        v.risk = float(np.exp(eta))


def _coverage_pairs(patients: Sequence[_Patient], pmf: np.ndarray):
    """Flattened (ED visit j, ED visit i, P(i's admission lands in j's window)) triples."""
    cdf = np.r_[0.0, np.cumsum(pmf)]
    J, I, Q = [], [], []
    planted, risk, retained = [], [], []
    offset = 0
    for p in patients:
        eds = [v for v in p.visits if v.ed]
        days = np.array([v.day for v in eds])
        for j, vj in enumerate(eds):
            lo = vj.day - days
            hi = lo + LABEL_WINDOW
            a = np.clip(lo, 0, LABEL_WINDOW + 1)
            b = np.clip(hi + 1, 0, LABEL_WINDOW + 1)
            q = cdf[b] - cdf[a]
            for i in np.flatnonzero(q > 0):
                J.append(offset + j)
                I.append(offset + i)
                Q.append(q[i])
        planted += [v.planted_p for v in eds]
        risk += [v.risk for v in eds]
        retained += [p.kind == "adult"] * len(eds)
        offset += len(eds)
    return (np.array(J, dtype=np.int64), np.array(I, dtype=np.int64), np.array(Q),
            np.array(planted), np.array(risk), np.array(retained, dtype=bool))


def _log_miss(p, J, I, Q, n):
    """Per visit, log P(no admission from any ED visit lands in its window)."""
    return np.bincount(J, np.log1p(-p[I] * Q), minlength=n)


def _admit_probability(scale, planted, risk, cap, pairs, iterations=60):
    """Per-visit admission probabilities.

    Background visits get ``min(cap, scale * risk)``.  A planted visit's own
    probability is lowered so that, after admissions spilling over from its
    neighbours, its chance of a positive label equals the planted confidence.
    ``pairs`` holds the coverage triples whose covered visit is planted.
    """
    J, I, Q = pairs
    p = np.where(planted > 0, planted, np.minimum(cap, scale * risk))
    is_planted = planted > 0
    if not is_planted.any():
        return p
    for _ in range(iterations):
        others = _log_miss(p, J, I, Q, len(p)) - np.log1p(-p)
        spill = -np.expm1(others[is_planted])
        target = planted[is_planted]
        fresh = np.clip((target - spill) / (1.0 - spill), 0.0, target)
        change = np.max(np.abs(fresh - p[is_planted]))
        p[is_planted] = fresh
        if change < 1e-12:
            break
    return p


def _calibrate(patients, config: SynthConfig, pmf):
    """Background scale hitting the target positive rate, plus admission probabilities."""
    J, I, Q, planted, risk, retained = _coverage_pairs(patients, pmf)
    n = int(retained.sum())
    if n == 0:
        return 0.0, 0.0, 0, planted
    target = config.positive_rate_target * n
    cap = config.background_cap
    sel = planted[J] > 0
    pairs = (J[sel], I[sel], Q[sel])

    def expected(scale):
        p = _admit_probability(scale, planted, risk, cap, pairs)
        return float(-np.expm1(_log_miss(p, J, I, Q, len(p)))[retained].sum())

    floor = expected(0.0)
    if floor > target:
        raise SynthConfigError(
            f"planted rules alone give a positive rate of {floor / n:.4f}, above the target "
            f"{config.positive_rate_target}"
        )
    bg = (planted == 0) & (risk > 0)
    hi = cap / risk[bg].min() if bg.any() else 0.0
    if expected(hi) < target:
        raise SynthConfigError(
            f"target positive rate {config.positive_rate_target} unreachable; "
            f"maximum is {expected(hi) / n:.4f}"
        )
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(hi, 1e-300):
            break
    scale = 0.5 * (lo + hi)
    return scale, expected(scale) / n, n, _admit_probability(scale, planted, risk, cap, pairs)


def _draw_outcomes(patient: _Patient, config: SynthConfig, sampler, pmf) -> None:
    rng = _rng(config, patient.index, 1)
    admissions = []
    for v in patient.visits:
        if not v.ed:
            continue
        if rng.random() < v.admit_p:
            v.admitted = True
            delay = int(rng.choice(len(pmf), p=pmf))
            a = _background_visit(rng, sampler, v.day + delay, False, v.facility, [], config)
            admissions.append(a)
    patient.visits.extend(admissions)
    patient.visits.sort(key=lambda v: v.day)

    adm_days = [a.day for a in patient.visits if not a.ed and not MENTAL_HEALTH_CCS[0] <= a.primary <= MENTAL_HEALTH_CCS[1]]
    odds = (config.positive_rate_target / (1 - config.positive_rate_target)) * (
        (1 - config.leakage_purity) / config.leakage_purity
    )
    noise = config.leakage_capture * odds
    for v in patient.visits:
        if not v.ed:
            continue
        v.positive = any(0 <= d - v.day <= LABEL_WINDOW for d in adm_days)
        if rng.random() < (config.leakage_capture if v.positive else noise) and len(v.procedures) < 21:
            v.procedures.append(config.leakage_procedure_ccs)


def _records(patient: _Patient) -> list[VisitRecord]:
    key = f"P{patient.index:07d}"
    out = []
    for k, v in enumerate(patient.visits):
        out.append(VisitRecord(
            visit_id=f"{key}-{k:03d}",
            patient_key=key,
            days_to_event=v.day,
            visit_type=VisitType.ED if v.ed else VisitType.INPATIENT,
            age=patient.age,
            sex=patient.sex,
            admission_month=1 + (v.day % HORIZON_DAYS) * 12 // HORIZON_DAYS,
            primary_ccs=v.primary,
            race=patient.race,
            length_of_stay=v.los,
            disposition=("routine", "transfer", "home_health", "ama")[_disposition(v)],
            facility_id=f"F{v.facility:03d}",
            secondary_ccs=tuple(v.secondary),
            procedure_ccs=tuple(v.procedures),
            extra_categoricals=(("pay1", patient.payer),),
        ))
    return out


def _disposition(v: _Visit) -> int:
    # deterministic from the visit's content so it carries no extra randomness
    if not v.ed:
        return 0
    h = (v.day * 31 + v.primary * 7 + len(v.secondary)) % 20
    return 3 if h == 0 else 2 if h < 3 else 1 if h < 5 else 0


def _missing_key_records(config: SynthConfig, sampler) -> list[VisitRecord]:
    n = int(round(config.missing_key_fraction * config.n_patients))
    rng = _rng(config, 2**32, 1)
    out = []
    for k in range(n):
        v = _background_visit(rng, sampler, int(rng.integers(0, HORIZON_DAYS)), True, 1, [], config)
        out.append(VisitRecord(
            visit_id=f"U{k:07d}",
            patient_key="",
            days_to_event=v.day,
            visit_type=VisitType.ED,
            age=int(rng.integers(MIN_ADULT_AGE, 90)),
            sex="F" if rng.random() < 0.5 else "M",
            admission_month=1 + v.day * 12 // HORIZON_DAYS,
            primary_ccs=v.primary,
            race="1",
            disposition="routine",
            facility_id=f"F{v.facility:03d}",
            secondary_ccs=tuple(v.secondary),
            procedure_ccs=tuple(v.procedures),
            extra_categoricals=(("pay1", "self_pay"),),
        ))
    return out


def generate_with_manifest(config: SynthConfig) -> tuple[list[VisitRecord], PlantManifest]:
    sampler = _CodeSampler(config)
    pmf = _delay_pmf()
    patients = [_make_patient(config, sampler, i) for i in range(config.n_patients)]
    for p in patients:
        _score_visits(p, config, sampler)
    scale, expected_rate, n_retained, admit_p = _calibrate(patients, config, pmf)
    flat = iter(admit_p.tolist())
    for p in patients:
        for v in p.visits:
            if v.ed:
                v.admit_p = next(flat)
    for p in patients:
        _draw_outcomes(p, config, sampler, pmf)

    visits = []
    exclusions = {"missing_patient_key": 0, "pregnancy": 0, "under_18": 0}
    matches = [0] * len(config.planted_rules)
    for p in patients:
        records = _records(p)
        visits.extend(records)
        if p.kind == "pregnant":
            exclusions["pregnancy"] += len(records)
        elif p.kind == "child":
            exclusions["under_18"] += len(records)
        else:
            _count_matches(p, config, matches)
    missing = _missing_key_records(config, sampler)
    exclusions["missing_patient_key"] = len(missing)
    visits.extend(missing)
    manifest = PlantManifest(
        planted_rules=config.planted_rules,
        positive_rate_target=config.positive_rate_target,
        background_scale=float(scale),
        expected_positive_rate=expected_rate,
        retained_ed_visits=n_retained,
        total_visits=len(visits),
        expected_exclusions=exclusions,
        plant_matches=matches,
        leakage_procedure_ccs=config.leakage_procedure_ccs,
    )
    return visits, manifest


def _count_matches(patient: _Patient, config: SynthConfig, matches: list) -> None:
    for v in patient.visits:
        if not v.ed:
            continue
        lookback = {u.primary for u in patient.visits if 1 <= v.day - u.day <= LOOKBACK}
        horizontal = {v.primary, *v.secondary}
        for k, rule in enumerate(config.planted_rules):
            target = lookback if rule.placement == LONGITUDINAL else horizontal
            if target.issuperset(rule.itemset):
                matches[k] += 1


def generate_synthetic_cohort(config: SynthConfig) -> list[VisitRecord]:
    return generate_with_manifest(config)[0]


def plant_manifest(config: SynthConfig) -> PlantManifest:
    """Planted rules, calibrated base rate and exact exclusion counts for ``config``."""
    return generate_with_manifest(config)[1]
