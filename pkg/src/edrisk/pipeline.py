"""Configuration and end-to-end orchestration.

The config file is flat ``key = value`` text.  Dotted prefixes group keys
(``synth.*``, ``split.*``, ``lr.*`` and so on); every key has a default, listed
in ``CONFIG_KEYS``.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import arc
from .bundle import atomic_write, load_model, save_model
from .cohort import (
    WINDOWS,
    VisitRecord,
    apply_exclusions,
    check_window,
    ingest_visits,
    label_index_visits,
    link_patient_timelines,
    write_visits,
)
from .featurize import EMPTY_CONTEXT, DEFAULT_COUNT_BINS, DEFAULT_EXCLUDED_FIELDS, extract_horizontal_itemset
from .linear import LogisticParams, top_coefficients
from .metrics import EvalReport, evaluate_all
from .stack import (
    PATIENT,
    RECORD,
    TEST,
    EnsembleConfig,
    PreparedVisit,
    labels_for,
    prepare_index_visits,
    prepare_visit,
    split_dataset,
    subset_batch,
    train_ensemble,
)
from .synth import HORIZONTAL, LONGITUDINAL, PlantedRule, SynthConfig, generate_with_manifest

log = logging.getLogger("edrisk")

INCOMPLETE_MARKER = "INCOMPLETE"

# key -> (default, description); defaults are strings as they would appear in a file
CONFIG_KEYS: dict[str, tuple[str, str]] = {
    "input": ("", "visit table to ingest; leave empty to generate a synthetic cohort"),
    "input.delimiter": (",", "field delimiter of the input table"),
    "windows": ("3,7,14", "readmission windows to train, any of 3, 7, 14"),
    "split.seed": ("0", "seed of the 80/10/10 partition"),
    "split.unit": (RECORD, "RECORD or PATIENT"),
    "featurize.count_bins": (",".join(map(str, DEFAULT_COUNT_BINS)), "bin edges for lookback counts"),
    "featurize.excluded_fields": (",".join(DEFAULT_EXCLUDED_FIELDS), "extra columns never used as features"),
    "lr.l2_strength": ("1e-4", "L2 penalty of the base logistic model"),
    "lr.learning_rate": ("1.0", "initial step length"),
    "lr.max_epochs": ("500", "epoch cap"),
    "lr.tolerance": ("1e-8", "relative loss change that stops fitting"),
    "nb.alpha": ("1.0", "additive smoothing of naive Bayes"),
    "arc.grid": (",".join(map(str, arc.DEFAULT_SUPPORT_GRID)), "support thresholds tried during tuning"),
    "arc.arc1_support": ("", "fixed ARC1 threshold; empty means tune"),
    "arc.arc2_support": ("", "fixed ARC2 threshold; empty means tune"),
    "arc.max_len": (str(arc.DEFAULT_MAX_LEN), "longest antecedent mined; 0 means unbounded"),
    "arc.tie_break": ("lexicographic", "lexicographic or confidence"),
    "meta.inputs": ("probability", "combiner inputs: probability or logit"),
    "meta.l2_strength": ("1e-4", "L2 penalty of the combiner"),
    "audit.min_count": ("20", "minimum occurrences before a feature can be flagged"),
    "audit.rate_threshold": ("0.9", "positive rate at which a feature is flagged"),
    "output": ("edrisk_out", "output directory"),
}
_SYNTH_FIELDS = {f.name: f for f in dataclasses.fields(SynthConfig) if f.name != "planted_rules"}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    input: str | None = None
    delimiter: str = ","
    schema: dict[str, str] = field(default_factory=dict)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    windows: tuple[int, ...] = WINDOWS
    split_seed: int = 0
    split_unit: str = RECORD
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    output: str = "edrisk_out"

    def __post_init__(self):
        if not self.windows:
            raise ConfigError("windows must not be empty")
        for w in self.windows:
            if w not in WINDOWS:
                raise ConfigError(f"window {w} not in {WINDOWS}")
        if (self.input is None) == (self.synth is None):
            raise ConfigError("exactly one of input and synth must be given")
        if self.split_unit not in (RECORD, PATIENT):
            raise ConfigError(f"split.unit must be {RECORD} or {PATIENT}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def parse_plants(text: str) -> tuple[PlantedRule, ...]:
    """``codes:PLACEMENT:confidence[:rate]`` entries separated by ``;``."""
    plants = []
    for entry in text.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        parts = entry.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"bad plant {entry!r}; expected codes:PLACEMENT:confidence[:rate]")
        codes = tuple(int(c) for c in parts[0].replace(",", " ").split())
        kwargs = {"rate": float(parts[3]), "decoy_rate": float(parts[3])} if len(parts) == 4 else {}
        plants.append(PlantedRule(codes, parts[1].strip().upper(), float(parts[2]), **kwargs))
    return tuple(plants)


def _synth_value(name: str, text: str):
    default = _SYNTH_FIELDS[name].default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    return type(default)(float(text)) if isinstance(default, int) else type(default)(text)


def config_from_mapping(values: Mapping[str, str], overrides: Mapping[str, object] | None = None) -> PipelineConfig:
    values = {k.strip().lower(): v.strip() for k, v in values.items()}
    for key in values:
        if key in CONFIG_KEYS or key.startswith("schema."):
            continue
        if key == "synth" or key == "synth.plants":
            continue
        if key.startswith("synth.") and key[6:] in _SYNTH_FIELDS:
            continue
        raise ConfigError(f"unknown config key {key!r}")

    def get(key):
        return values.get(key, CONFIG_KEYS[key][0])

    try:
        input_path = get("input") or None
        synth_keys = {k[6:]: v for k, v in values.items() if k.startswith("synth.") and k != "synth.plants"}
        wants_synth = bool(synth_keys) or "synth.plants" in values or "synth" in values
        if input_path and wants_synth:
            raise ConfigError("exactly one of input and synth.* may be given")
        synth = None
        if not input_path:
            kwargs = {k: _synth_value(k, v) for k, v in synth_keys.items()}
            if "synth.plants" in values:
                kwargs["planted_rules"] = parse_plants(values["synth.plants"])
            synth = SynthConfig(**kwargs)
        max_len = int(get("arc.max_len"))
        ensemble = EnsembleConfig(
            logistic=LogisticParams(
                l2_strength=float(get("lr.l2_strength")),
                learning_rate=float(get("lr.learning_rate")),
                max_epochs=int(get("lr.max_epochs")),
                tolerance=float(get("lr.tolerance")),
            ),
            nb_alpha=float(get("nb.alpha")),
            support_grid=_ints(get("arc.grid")),
            arc1_support=int(get("arc.arc1_support")) if get("arc.arc1_support") else None,
            arc2_support=int(get("arc.arc2_support")) if get("arc.arc2_support") else None,
            max_antecedent_len=max_len or None,
            tie_break=get("arc.tie_break"),
            meta=LogisticParams(l2_strength=float(get("meta.l2_strength"))),
            meta_inputs=get("meta.inputs"),
            count_bins=_ints(get("featurize.count_bins")),
            excluded_fields=tuple(x for x in get("featurize.excluded_fields").split(",") if x),
            audit_min_count=int(get("audit.min_count")),
            audit_rate_threshold=float(get("audit.rate_threshold")),
        )
        if not ensemble.support_grid:
            raise ConfigError("arc.grid must not be empty")
        cfg = PipelineConfig(
            input=input_path,
            delimiter=get("input.delimiter"),
            schema={k[7:]: v for k, v in values.items() if k.startswith("schema.")},
            synth=synth,
            windows=_ints(get("windows")),
            split_seed=int(get("split.seed")),
            split_unit=get("split.unit").upper(),
            ensemble=ensemble,
            output=get("output"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if overrides:
        cfg = apply_overrides(cfg, **overrides)
    return cfg


def read_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str.lower
    try:
        parser.read_string("[edrisk]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return dict(parser["edrisk"])


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    values = read_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    return config_from_mapping(values, {k: v for k, v in overrides.items() if v is not None})


def apply_overrides(cfg: PipelineConfig, seed=None, windows=None, out=None, tie_break=None) -> PipelineConfig:
    """Command-line flags win over file values."""
    changes = {}
    if seed is not None:
        changes["split_seed"] = int(seed)
        if cfg.synth is not None:
            changes["synth"] = dataclasses.replace(cfg.synth, seed=int(seed))
    if windows:
        changes["windows"] = tuple(sorted(set(int(w) for w in windows)))
    if out is not None:
        changes["output"] = str(out)
    if tie_break is not None:
        changes["ensemble"] = dataclasses.replace(cfg.ensemble, tie_break=tie_break)
    return dataclasses.replace(cfg, **changes) if changes else cfg


# ---------------------------------------------------------------- stages


@dataclass
class Cohort:
    visits: list[VisitRecord]
    kept: list[VisitRecord]
    exclusion_text: str
    timelines: dict
    items: list[PreparedVisit]
    manifest_text: str | None = None


def load_visits(cfg: PipelineConfig) -> tuple[list[VisitRecord], str | None]:
    if cfg.input is not None:
        with open(cfg.input, encoding="utf-8", newline="") as fh:
            return ingest_visits(fh, cfg.schema or None, cfg.delimiter), None
    visits, manifest = generate_with_manifest(cfg.synth)
    return visits, manifest.to_text()


class _Stages:
    """Runs named stages, timing each and wrapping failures."""

    def __init__(self):
        self.runtimes: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        log.info("stage %s", name)
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        self.runtimes[name] = self.runtimes.get(name, 0.0) + time.perf_counter() - start
        return result


def build_cohort(cfg: PipelineConfig, stages: _Stages | None = None) -> Cohort:
    stages = stages or _Stages()
    visits, manifest = stages.run("load", load_visits, cfg)
    kept, report = stages.run("exclusions", apply_exclusions, visits)
    timelines = stages.run("linkage", link_patient_timelines, kept)
    items = stages.run("featurize", prepare_index_visits, timelines)
    return Cohort(visits, kept, report.to_text(), timelines, items, manifest)


def _bundle_dir(out: Path, window: int) -> Path:
    return out / "models" / f"window_{window}"


def _train_windows(cfg: PipelineConfig, cohort: Cohort, stages: _Stages, out: Path):
    split = stages.run("split", split_dataset, cohort.items, cfg.split_seed, cfg.split_unit)
    models, tests = {}, {}
    for w in cfg.windows:
        labeled = stages.run(f"label_w{w}", label_index_visits, cohort.timelines, w)
        y = labels_for(cohort.items, labeled)
        model, report = stages.run(f"train_w{w}", train_ensemble, cohort.items, y, split, w, cfg.ensemble)
        atomic_write(out / f"training_report_w{w}.txt", report.to_text())
        stages.run(f"save_w{w}", save_model, model, _bundle_dir(out, w))
        models[w] = model
        tests[w] = subset_batch(cohort.items, y, split, TEST)
    return models, tests


def _test_sets(cfg: PipelineConfig, cohort: Cohort, stages: _Stages):
    split = stages.run("split", split_dataset, cohort.items, cfg.split_seed, cfg.split_unit)
    tests = {}
    for w in cfg.windows:
        labeled = stages.run(f"label_w{w}", label_index_visits, cohort.timelines, w)
        tests[w] = subset_batch(cohort.items, labels_for(cohort.items, labeled), split, TEST)
    return tests


def _write_eval(out: Path, report: EvalReport) -> None:
    atomic_write(out / "eval_report.tsv", report.to_tsv())
    atomic_write(out / "eval_counts.txt", report.counts_text())
    atomic_write(out / "runtimes.txt", report.runtimes_text())


def _guarded(cfg: PipelineConfig, body) -> int:
    """Run ``body(out, stages)`` with an INCOMPLETE marker until it succeeds."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    atomic_write(marker, "stage start\n")
    stages = _Stages()
    try:
        body(out, stages)
    except PipelineError as exc:
        atomic_write(marker, f"stage {exc.stage}\nerror {exc.cause}\n")
        print(f"edrisk: error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except OSError as exc:
        atomic_write(marker, f"stage write\nerror {exc}\n")
        print(f"edrisk: error in stage write: {exc}", file=sys.stderr)
        return 1
    marker.unlink()
    return 0


def run_pipeline(cfg: PipelineConfig, evaluate: bool = True) -> int:
    """Cohort, labels, split, training, bundles and (optionally) evaluation.

    Artifacts in ``cfg.output``: ``exclusion_report.txt``,
    ``training_report_w<w>.txt``, ``models/window_<w>/``, ``eval_report.tsv``,
    ``eval_counts.txt``, ``runtimes.txt`` and, for synthetic runs,
    ``synth_manifest.txt``.  Returns a process exit status.
    """

    def body(out: Path, stages: _Stages):
        cohort = build_cohort(cfg, stages)
        atomic_write(out / "exclusion_report.txt", cohort.exclusion_text)
        if cohort.manifest_text is not None:
            atomic_write(out / "synth_manifest.txt", cohort.manifest_text)
        models, tests = _train_windows(cfg, cohort, stages, out)
        if evaluate:
            report = stages.run("evaluate", evaluate_all, models, tests)
            report.runtimes = dict(stages.runtimes)
            _write_eval(out, report)
            for w, msg in report.errors.items():
                print(f"edrisk: window {w}: {msg}", file=sys.stderr)

    return _guarded(cfg, body)


def evaluate_bundles(cfg: PipelineConfig) -> int:
    """Re-score saved bundles on the TEST split the config reproduces."""

    def body(out: Path, stages: _Stages):
        cohort = build_cohort(cfg, stages)
        tests = _test_sets(cfg, cohort, stages)
        models = {w: stages.run(f"load_w{w}", load_model, _bundle_dir(out, w)) for w in cfg.windows}
        report = stages.run("evaluate", evaluate_all, models, tests)
        report.runtimes = dict(stages.runtimes)
        _write_eval(out, report)

    return _guarded(cfg, body)


def synth_to_files(cfg: PipelineConfig) -> int:
    """Write a synthetic cohort and its manifest."""
    if cfg.synth is None:
        raise ConfigError("synth needs a synthetic config (no input key)")

    def body(out: Path, stages: _Stages):
        visits, manifest = stages.run("synth", generate_with_manifest, cfg.synth)
        buf = io.StringIO()
        write_visits(visits, buf, cfg.delimiter)
        atomic_write(out / "cohort.csv", buf.getvalue())
        atomic_write(out / "synth_manifest.txt", manifest.to_text())

    return _guarded(cfg, body)


def ingest_to_files(cfg: PipelineConfig) -> int:
    """Load (or generate) visits, apply exclusions, write the retained table."""

    def body(out: Path, stages: _Stages):
        visits, manifest = stages.run("load", load_visits, cfg)
        kept, report = stages.run("exclusions", apply_exclusions, visits)
        buf = io.StringIO()
        write_visits(kept, buf, cfg.delimiter)
        atomic_write(out / "cohort_retained.csv", buf.getvalue())
        atomic_write(out / "exclusion_report.txt", report.to_text())

    return _guarded(cfg, body)


# ---------------------------------------------------------------- explain / predict


def _format_rules(title: str, rules) -> list[str]:
    lines = [f"{title} CCS\tSupport\tConfidence"]
    lines += [f"{', '.join(map(str, r.antecedent))}\t{r.support}\t{r.confidence[1]:.2f}" for r in rules]
    return lines


def explain_text(bundle: str | Path, k: int = 5, min_support: int | None = arc.DEFAULT_DISPLAY_SUPPORT) -> str:
    """Top LR coefficients, top rules of both rule classifiers and the audit.

    Rules are ranked by positive-outcome confidence, then support; rules with
    support below ``min_support`` are left out of the listing only.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    model = load_model(bundle)
    lines = [f"# window {model.window_days}", "", "LR feature\tValue\tCoefficient"]
    for name, value, coef in top_coefficients(model.logistic, model.vocabulary, k):
        lines.append(f"{name}\t{value}\t{coef:+.4f}")
    lines.append("")
    lines += _format_rules("ARC1", model.arc1.top_rules(k, min_support))
    lines.append("")
    lines += _format_rules("ARC2", model.arc2.top_rules(k, min_support))
    lines += ["", "Leakage audit feature\tValue\tPositive rate\tCount"]
    for name, value, rate, count in model.audit:
        lines.append(f"{name}\t{value}\t{rate:.4f}\t{count}")
    return "\n".join(lines) + "\n"


def bundle_windows(path: str | Path) -> dict[int, Path]:
    """A single bundle, or a directory of ``window_<w>`` bundles."""
    path = Path(path)
    if (path / "manifest.txt").exists():
        return {0: path}
    if (path / "models").is_dir():
        path = path / "models"
    found = {}
    for sub in sorted(path.glob("window_*")):
        if (sub / "manifest.txt").exists():
            found[int(sub.name.split("_", 1)[1])] = sub
    if not found:
        raise FileNotFoundError(f"no model bundle under {path}")
    return found


def _read_table(path, delimiter: str) -> list[VisitRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if not text.strip():
        return []
    return ingest_visits(io.StringIO(text), None, delimiter)


def predict_scores(bundle: str | Path, visits_path, timelines_path, delimiter: str = ",") -> str:
    """Tab-separated risk scores, one line per ED visit in ``visits_path``.

    Timelines come from ``timelines_path`` plus the scored visits themselves.
    A visit whose patient has no history there gets an empty lookback and a
    warning on stderr.
    """
    models = {}
    for key, path in bundle_windows(bundle).items():
        m = load_model(path)
        models[m.window_days if key == 0 else key] = m
    visits = [v for v in _read_table(visits_path, delimiter) if v.is_ed]
    if not visits:
        return ""
    history = _read_table(timelines_path, delimiter)
    known = {v.patient_key for v in history if v.patient_key}
    merged = {v.visit_id: v for v in history}
    for v in visits:
        merged.setdefault(v.visit_id, v)
    timelines = link_patient_timelines(v for v in merged.values() if v.patient_key)
    items = []
    for v in visits:
        if v.patient_key and v.patient_key in known:
            items.append(prepare_visit(v, timelines[v.patient_key]))
        else:
            print(f"edrisk: warning: no timeline for visit {v.visit_id}; using empty lookback", file=sys.stderr)
            items.append(PreparedVisit(v, EMPTY_CONTEXT, frozenset(), extract_horizontal_itemset(v)))
    windows = sorted(models)
    columns = {w: models[w].score(items) for w in windows}
    lines = ["visit_id\t" + "\t".join(f"risk_{w}d" for w in windows)]
    for i, v in enumerate(visits):
        lines.append(v.visit_id + "\t" + "\t".join(repr(float(columns[w][i])) for w in windows))
    return "\n".join(lines) + "\n"


def window_list(values: Sequence[int] | None) -> tuple[int, ...] | None:
    if not values:
        return None
    return tuple(sorted({check_window(int(w)) for w in values}))
