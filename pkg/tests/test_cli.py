import hashlib
import io
import random
from pathlib import Path

import numpy as np
import pytest

from edrisk.bundle import FORMAT_VERSION, CorruptBundleError, VersionError, load_model, read_manifest, save_model
from edrisk.cli import main
from edrisk.cohort import apply_exclusions, write_visits
from edrisk.pipeline import (
    INCOMPLETE_MARKER,
    ConfigError,
    config_from_mapping,
    explain_text,
    load_config,
    parse_plants,
    predict_scores,
    read_config_text,
    run_pipeline,
)
from edrisk.stack import TEST, subset_batch
from edrisk.synth import LONGITUDINAL, SynthConfig, generate_synthetic_cohort

SMALL = {"synth.n_patients": "3000", "windows": "7,14"}


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_defaults():
    cfg = config_from_mapping({})
    assert cfg.windows == (3, 7, 14) and cfg.synth == SynthConfig() and cfg.input is None
    assert cfg.ensemble.tie_break == "lexicographic" and cfg.split_unit == "RECORD"


def test_file_values_and_flag_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nwindows = 3\nsynth.seed = 4\narc.tie_break = confidence\noutput = a\n")
    cfg = load_config(path, seed=9, out="b", windows=(7, 14))
    assert cfg.windows == (7, 14) and cfg.synth.seed == 9 and cfg.split_seed == 9 and cfg.output == "b"
    assert cfg.ensemble.tie_break == "confidence"


@pytest.mark.parametrize("values", [
    {"windows": ""},
    {"windows": "30"},
    {"input": "x.csv", "synth.n_patients": "10"},
    {"bogus.key": "1"},
    {"lr.max_epochs": "many"},
    {"split.unit": "FACILITY"},
])
def test_invalid_configs(values):
    with pytest.raises(ConfigError):
        config_from_mapping(values)


def test_malformed_config_text():
    with pytest.raises(ConfigError):
        read_config_text("just words\n")


def test_plants_from_config():
    (rule,) = parse_plants("50 141 250 251:longitudinal:0.72")
    assert rule.itemset == (50, 141, 250, 251) and rule.placement == LONGITUDINAL
    cfg = config_from_mapping({"synth.plants": "2,237:HORIZONTAL:0.5:0.01"})
    assert cfg.synth.planted_rules[0].rate == 0.01


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_mapping({**SMALL, "output": str(out)})
    assert run_pipeline(cfg) == 0
    return cfg, out


def test_pipeline_artifacts(trained):
    _, out = trained
    names = {p.name for p in out.iterdir()}
    assert {"exclusion_report.txt", "training_report_w7.txt", "training_report_w14.txt", "eval_report.tsv",
            "eval_counts.txt", "runtimes.txt", "synth_manifest.txt", "models"} <= names
    assert INCOMPLETE_MARKER not in names
    assert (out / "eval_report.tsv").read_text().startswith("Window\tLR\tARC1\tARC2\tNB\tEnsemble\n7-day\t")


def test_failed_stage_is_named_and_marked(tmp_path, capsys):
    cfg = config_from_mapping({"input": str(tmp_path / "missing.csv"), "output": str(tmp_path / "o")})
    assert run_pipeline(cfg) != 0
    assert "stage load" in capsys.readouterr().err
    assert (tmp_path / "o" / INCOMPLETE_MARKER).read_text().startswith("stage load")


def test_bundle_round_trip_and_digest(trained, tmp_path):
    _, out = trained
    model = load_model(out / "models" / "window_14")
    copy = save_model(model, tmp_path / "copy")
    assert tree_digest(copy) == tree_digest(out / "models" / "window_14")
    assert read_manifest(copy)["format_version"] == str(FORMAT_VERSION)


def test_every_flipped_byte_position_class_is_caught(trained, tmp_path):
    _, out = trained
    src = out / "models" / "window_14"
    rng = random.Random(0)
    for f in sorted(src.iterdir()):
        target = save_model(load_model(src), tmp_path / f"b_{f.stem}")
        data = bytearray((target / f.name).read_bytes())
        i = rng.randrange(len(data))
        data[i] ^= 0x01
        (target / f.name).write_bytes(bytes(data))
        with pytest.raises((CorruptBundleError, VersionError)):
            load_model(target)


def test_future_version_refused(trained, tmp_path):
    _, out = trained
    target = save_model(load_model(out / "models" / "window_7"), tmp_path / "future")
    text = (target / "manifest.txt").read_text().replace(f"format_version {FORMAT_VERSION}", "format_version 99")
    (target / "manifest.txt").write_text(text)
    with pytest.raises(VersionError):
        load_model(target)


def test_explain_layout(trained):
    _, out = trained
    text = explain_text(out / "models" / "window_14", k=3, min_support=None)
    lines = text.splitlines()
    assert "LR feature\tValue\tCoefficient" in lines
    assert lines[lines.index("ARC1 CCS\tSupport\tConfidence") + 1].count("\t") == 2
    assert "ARC2 CCS\tSupport\tConfidence" in lines
    with pytest.raises(ValueError):
        explain_text(out / "models" / "window_14", k=0)


@pytest.fixture(scope="module")
def cohort_files(trained, tmp_path_factory):
    cfg, _ = trained
    d = tmp_path_factory.mktemp("files")
    kept, _ = apply_exclusions(generate_synthetic_cohort(cfg.synth))
    buf = io.StringIO()
    write_visits(kept, buf)
    (d / "cohort.csv").write_text(buf.getvalue())
    return d, kept


def _parse_scores(text):
    rows = text.splitlines()[1:]
    return {r.split("\t")[0]: tuple(float(x) for x in r.split("\t")[1:]) for r in rows}


def test_predict_replays_training_scores(trained, cohort_files):
    cfg, out = trained
    d, kept = cohort_files
    from edrisk.cohort import label_index_visits, link_patient_timelines
    from edrisk.stack import labels_for, prepare_index_visits, split_dataset

    timelines = link_patient_timelines(kept)
    items = prepare_index_visits(timelines)
    split = split_dataset(items, cfg.split_seed)
    model = load_model(out / "models" / "window_14")
    labels = labels_for(items, label_index_visits(timelines, 14))
    batch = subset_batch(items, labels, split, TEST)
    expected = dict(zip((p.visit_id for p in batch.items), model.score(batch.items)))
    before = tree_digest(out / "models")
    scores = _parse_scores(predict_scores(out, d / "cohort.csv", d / "cohort.csv"))
    assert tree_digest(out / "models") == before
    assert all(scores[vid][1] == s for vid, s in expected.items())


def test_predict_row_order_independent(trained, cohort_files, tmp_path):
    _, out = trained
    d, kept = cohort_files
    sample = kept[:300]
    shuffled = sample[:]
    random.Random(1).shuffle(shuffled)
    for name, rows in (("a.csv", sample), ("b.csv", shuffled)):
        buf = io.StringIO()
        write_visits(rows, buf)
        (tmp_path / name).write_text(buf.getvalue())
    a = _parse_scores(predict_scores(out, tmp_path / "a.csv", d / "cohort.csv"))
    b = _parse_scores(predict_scores(out, tmp_path / "b.csv", d / "cohort.csv"))
    assert a == b and len(a) == sum(v.is_ed for v in sample)


def test_predict_empty_and_unresolvable(trained, cohort_files, tmp_path, capsys):
    _, out = trained
    d, kept = cohort_files
    (tmp_path / "empty.csv").write_text("")
    assert predict_scores(out, tmp_path / "empty.csv", d / "cohort.csv") == ""
    (tmp_path / "none.csv").write_text("")
    ed = next(v for v in kept if v.is_ed)
    buf = io.StringIO()
    write_visits([ed], buf)
    (tmp_path / "one.csv").write_text(buf.getvalue())
    scores = _parse_scores(predict_scores(out, tmp_path / "one.csv", tmp_path / "none.csv"))
    assert set(scores) == {ed.visit_id}
    assert "no timeline" in capsys.readouterr().err


def test_cli_commands(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("synth.n_patients = 3000\nwindows = 14\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    assert main(["explain", str(tmp_path / "o" / "models" / "window_14"), "-k", "2"]) == 0
    assert "ARC1 CCS\tSupport\tConfidence" in capsys.readouterr().out
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "i")]) == 0
    assert (tmp_path / "i" / "exclusion_report.txt").read_text() == (tmp_path / "o" / "exclusion_report.txt").read_text()
    scores = tmp_path / "scores.tsv"
    assert main(["predict", str(tmp_path / "o"), str(tmp_path / "s" / "cohort.csv"),
                 str(tmp_path / "s" / "cohort.csv"), "--out", str(scores)]) == 0
    assert scores.read_text().startswith("visit_id\trisk_14d\n")
    assert main(["explain", str(tmp_path / "o" / "models" / "window_14"), "-k", "0"]) == 2
    cfg.write_text("windows =\n")
    assert main(["train", "--config", str(cfg)]) == 2


def test_evaluate_reproduces_train_report(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("synth.n_patients = 3000\nwindows = 7\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    first = (tmp_path / "o" / "eval_report.tsv").read_text()
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "eval_report.tsv").read_text() == first
