"""Directory bundles for fitted ensembles.

A bundle is a directory of line-oriented text files plus ``manifest.txt``,
which records the format version, the creation parameters and a SHA-256
digest of every component file.  The manifest's last line is a digest of the
lines above it, so any single-byte change anywhere in the bundle is caught.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import tempfile
from pathlib import Path
from urllib.parse import quote, unquote

from .arc import RuleSet
from .featurize import FeatureVocabulary
from .linear import LogisticModel, NaiveBayesModel
from .stack import EnsembleModel

FORMAT_VERSION = 1
COMPONENTS = ("vocabulary", "logistic", "naive_bayes", "arc1", "arc2", "meta", "audit")


class BundleError(Exception):
    pass


class VersionError(BundleError):
    pass


class CorruptBundleError(BundleError):
    pass


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path | str, text: str) -> None:
    """Write a whole file via a temporary sibling and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def audit_to_text(flags) -> str:
    lines = ["# leakage audit: field value positive_rate count"]
    for name, value, rate, count in flags:
        lines.append(f"{quote(name, safe='')} {quote(str(value), safe='')} {float(rate)!r} {count}")
    return "\n".join(lines) + "\n"


def audit_from_text(text: str) -> list:
    flags = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, value, rate, count = line.split()
        flags.append((unquote(name), unquote(value), float(rate), int(count)))
    return flags


def _component_texts(model: EnsembleModel) -> dict[str, str]:
    return {
        "vocabulary": model.vocabulary.to_text(),
        "logistic": model.logistic.to_text(),
        "naive_bayes": model.naive_bayes.to_text(),
        "arc1": model.arc1.to_text(),
        "arc2": model.arc2.to_text(),
        "meta": model.meta.to_text(),
        "audit": audit_to_text(model.audit),
    }


def manifest_text(model: EnsembleModel, texts: dict[str, str]) -> str:
    lines = [
        f"format_version {FORMAT_VERSION}",
        f"window_days {model.window_days}",
        f"split_seed {model.split_seed}",
        f"split_unit {model.split_unit}",
        f"meta_inputs {model.meta_inputs}",
        f"arc1_min_support {model.arc1.min_support}",
        f"arc2_min_support {model.arc2.min_support}",
        f"dimension {model.vocabulary.dimension}",
    ]
    for name in COMPONENTS:
        lines.append(f"file {name}.txt sha256 {_digest(texts[name].encode('utf-8'))}")
    body = "\n".join(lines) + "\n"
    return body + f"manifest_sha256 {_digest(body.encode('utf-8'))}\n"


def save_model(model: EnsembleModel, path: Path | str) -> Path:
    """Write ``model`` as a bundle directory, replacing any existing one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    texts = _component_texts(model)
    staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name in COMPONENTS:
            atomic_write(staging / f"{name}.txt", texts[name])
        atomic_write(staging / "manifest.txt", manifest_text(model, texts))
        if path.exists():
            retired = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            os.replace(path, retired / path.name)
            os.replace(staging, path)
            shutil.rmtree(retired)
        else:
            os.replace(staging, path)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return path


def read_manifest(path: Path | str) -> dict:
    """Parse and verify a bundle manifest; components are not touched."""
    path = Path(path)
    try:
        raw = (path / "manifest.txt").read_bytes()
    except FileNotFoundError as exc:
        raise BundleError(f"{path} is not a model bundle (no manifest.txt)") from exc
    try:
        text = raw.decode("utf-8")
        lines = text.splitlines()
        fields = {}
        files = {}
        for line in lines:
            parts = line.split()
            if parts[0] == "file":
                files[parts[1]] = parts[3]
            else:
                fields[parts[0]] = parts[1]
        version = int(fields["format_version"])
    except Exception as exc:
        raise CorruptBundleError(f"unreadable manifest in {path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"bundle format_version {version} is not supported (expected {FORMAT_VERSION})")
    body = text[: text.rfind("manifest_sha256")]
    if fields.get("manifest_sha256") != _digest(body.encode("utf-8")):
        raise CorruptBundleError(f"manifest digest mismatch in {path}")
    fields["files"] = files
    return fields


def load_model(path: Path | str) -> EnsembleModel:
    path = Path(path)
    manifest = read_manifest(path)
    texts = {}
    for name in COMPONENTS:
        fname = f"{name}.txt"
        try:
            data = (path / fname).read_bytes()
        except FileNotFoundError as exc:
            raise CorruptBundleError(f"missing component {fname}") from exc
        if manifest["files"].get(fname) != _digest(data):
            raise CorruptBundleError(f"digest mismatch for {fname}")
        texts[name] = data.decode("utf-8")
    try:
        model = EnsembleModel(
            vocabulary=FeatureVocabulary.from_text(texts["vocabulary"]),
            logistic=LogisticModel.from_text(texts["logistic"]),
            naive_bayes=NaiveBayesModel.from_text(texts["naive_bayes"]),
            arc1=RuleSet.from_text(texts["arc1"]),
            arc2=RuleSet.from_text(texts["arc2"]),
            meta=LogisticModel.from_text(texts["meta"]),
            window_days=int(manifest["window_days"]),
            split_seed=int(manifest["split_seed"]),
            split_unit=manifest["split_unit"],
            meta_inputs=manifest["meta_inputs"],
            audit=audit_from_text(texts["audit"]),
        )
    except Exception as exc:
        raise CorruptBundleError(f"cannot parse bundle {path}: {exc}") from exc
    if model.vocabulary.dimension != model.logistic.dimension:
        raise CorruptBundleError("vocabulary and logistic dimensions differ")
    return model
