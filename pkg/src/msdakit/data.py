"""Dataset ingestion and generation.

Domains are stored as one CSV per (subject, session) with a JSON
manifest beside them. The synthetic generator builds multi-domain
classification problems whose inter-domain shift is a single tunable
affine perturbation magnitude, mirroring the source/target structure
of the real evaluation protocols at desk scale.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import (
    ConfigError,
    DataFileError,
    DimensionError,
    FormatError,
    LabelError,
    ProtocolError,
)
from .numerics import Rng

# Per-unit-shift magnitudes of the three affine perturbation parts.
ROTATION_SCALE = 0.5
TRANSLATION_SCALE = 0.7
AXIS_SCALE_RANGE = 0.3
# Radius growth per class index. Distinct radii give every class pair a
# distinct distance, so no relabeling of the constellation is congruent
# to the original; alignment cannot silently permute classes.
CLASS_RADIUS_SPREAD = 0.35

LOSO = "cross_subject_loso"
CROSS_SESSION = "cross_session"


@dataclass
class DomainDataset:
    """A labeled (or unlabeled) feature collection for one domain."""

    domain_key: tuple[int, int]  # (subject_id, session_id)
    features: np.ndarray
    labels: np.ndarray | None
    class_count: int

    def __post_init__(self):
        self.domain_key = (int(self.domain_key[0]), int(self.domain_key[1]))
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got ndim {self.features.ndim}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if self.labels.shape[0] != self.features.shape[0]:
                raise DimensionError(
                    f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows"
                )
            bad = (self.labels < 0) | (self.labels >= self.class_count)
            if bad.any():
                raise LabelError(
                    f"label {int(self.labels[np.argmax(bad)])} outside [0, {self.class_count}) "
                    f"in domain {self.domain_key}"
                )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic multi-domain dataset."""

    num_domains: int  # M sources + 1 target
    classes: int
    feature_dim: int
    class_separation: float
    domain_shift: float
    samples_per_class_per_domain: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError("need at least one source and one target domain")
        if self.classes < 2 or self.classes > self.feature_dim:
            raise ConfigError(
                f"classes must lie in [2, feature_dim], got {self.classes} with D={self.feature_dim}"
            )
        if self.class_separation <= 0.0:
            raise ConfigError("class_separation must be positive")
        if self.domain_shift < 0.0:
            raise ConfigError("domain_shift must be non-negative")
        if self.samples_per_class_per_domain < 1:
            raise ConfigError("samples_per_class_per_domain must be >= 1")


def class_means(classes: int, dim: int, separation: float) -> np.ndarray:
    """Class centers on orthogonal axes, every pair at least
    ``separation`` apart, with strictly increasing radii so the
    constellation has no symmetry that swaps classes."""
    means = np.zeros((classes, dim))
    base = separation / math.sqrt(2.0)
    for c in range(classes):
        means[c, c] = base * (1.0 + CLASS_RADIUS_SPREAD * c)
    return means


def _domain_affine(rng: Rng, dim: int, shift: float):
    """One domain's perturbation: rotation, axis scaling, translation.

    The random draws are independent of ``shift`` so the perturbation
    scales continuously (and monotonically) with it for a fixed seed.
    """
    skew = rng.normal(dim, dim)
    skew = (skew - skew.T) / math.sqrt(2.0 * dim)
    rotation = expm(ROTATION_SCALE * shift * skew)
    scaling = 1.0 + AXIS_SCALE_RANGE * shift * rng.uniform(-1.0, 1.0, 1, dim)
    translation = TRANSLATION_SCALE * shift * rng.normal(1, dim)
    return rotation, scaling, translation


def generate_synth(spec: SynthSpec) -> list[DomainDataset]:
    """Deterministic multi-domain sample; the last domain is the target."""
    rng = Rng(spec.seed)
    means = class_means(spec.classes, spec.feature_dim, spec.class_separation)
    datasets = []
    for d in range(spec.num_domains):
        child = rng.child(f"domain/{d}")
        rotation, scaling, translation = _domain_affine(
            child.child("affine"), spec.feature_dim, spec.domain_shift
        )
        feats = []
        labels = []
        for c in range(spec.classes):
            base = means[c] + spec.noise_sigma * child.child(f"noise/{c}").normal(
                spec.samples_per_class_per_domain, spec.feature_dim
            )
            feats.append(base @ rotation.T * scaling + translation)
            labels.append(np.full(spec.samples_per_class_per_domain, c, dtype=np.int64))
        datasets.append(
            DomainDataset(
                domain_key=(d, 0),
                features=np.vstack(feats),
                labels=np.concatenate(labels),
                class_count=spec.classes,
            )
        )
    return datasets


# -- CSV + manifest storage -----------------------------------------------------


def _fmt(x: float) -> str:
    return format(x, ".17g")


def domain_csv_name(key: tuple[int, int]) -> str:
    return f"domain_s{key[0]:03d}_e{key[1]:03d}.csv"


def write_domain_csv(path, dataset: DomainDataset) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.feature_dim)])
        labels = dataset.labels if dataset.labels is not None else np.full(dataset.n, -1)
        for i in range(dataset.n):
            writer.writerow([int(labels[i])] + [_fmt(v) for v in dataset.features[i]])


def write_dataset_files(datasets: list[DomainDataset], out_dir) -> Path:
    """Write one CSV per domain plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not datasets:
        raise DimensionError("write_dataset_files: no datasets")
    dims = {d.feature_dim for d in datasets}
    if len(dims) != 1:
        raise DimensionError(f"inconsistent feature dims across domains: {sorted(dims)}")
    entries = []
    for ds in datasets:
        name = domain_csv_name(ds.domain_key)
        write_domain_csv(out_dir / name, ds)
        entries.append(
            {"subject_id": ds.domain_key[0], "session_id": ds.domain_key[1], "path": name}
        )
    manifest = {
        "class_count": datasets[0].class_count,
        "feature_dim": datasets[0].feature_dim,
        "domains": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_de_features(manifest_path) -> list[DomainDataset]:
    """Parse a manifest and its per-domain CSVs into DomainDatasets."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataFileError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    for key in ("class_count", "feature_dim", "domains"):
        if key not in manifest:
            raise FormatError(f"manifest {manifest_path} missing key '{key}'")
    class_count = int(manifest["class_count"])
    feature_dim = int(manifest["feature_dim"])
    datasets = []
    for entry in manifest["domains"]:
        path = manifest_path.parent / entry["path"]
        key = (int(entry["subject_id"]), int(entry["session_id"]))
        datasets.append(_read_domain_csv(path, key, class_count, feature_dim))
    return datasets


def _read_domain_csv(
    path: Path, key: tuple[int, int], class_count: int, feature_dim: int
) -> DomainDataset:
    if not path.is_file():
        raise DataFileError(f"domain file not found: {path}")
    features = []
    labels = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != feature_dim + 1:
            raise FormatError(f"{path}:1: header must have {feature_dim + 1} columns")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != feature_dim + 1:
                raise FormatError(
                    f"{path}:{lineno}: expected {feature_dim + 1} values, got {len(row)}"
                )
            try:
                labels.append(int(row[0]))
                features.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    label_arr = np.asarray(labels, dtype=np.int64)
    if (label_arr >= class_count).any() or (label_arr < -1).any():
        bad = label_arr[(label_arr >= class_count) | (label_arr < -1)][0]
        raise LabelError(f"{path}: label {int(bad)} outside [-1, {class_count})")
    unlabeled = (label_arr == -1).all() if label_arr.size else True
    return DomainDataset(
        domain_key=key,
        features=np.asarray(features, dtype=np.float64).reshape(len(labels), feature_dim),
        labels=None if unlabeled else label_arr,
        class_count=class_count,
    )


# -- evaluation protocols ---------------------------------------------------------


@dataclass
class ProtocolPlan:
    kind: str
    folds: list[tuple[list[tuple[int, int]], tuple[int, int]]]


def make_protocol(datasets: list[DomainDataset], kind: str) -> ProtocolPlan:
    """Build fold assignments for one of the two evaluation protocols.

    Leave-one-subject-out uses each subject's earliest session as its
    domain, holding one subject out per fold. Cross-session uses, per
    subject, all but the final session as sources and the final session
    as the target.
    """
    by_subject: dict[int, list[tuple[int, int]]] = {}
    for ds in datasets:
        by_subject.setdefault(ds.domain_key[0], []).append(ds.domain_key)
    for sessions in by_subject.values():
        sessions.sort()
    subjects = sorted(by_subject)

    if kind == LOSO:
        if len(subjects) < 2:
            raise ProtocolError(
                f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}"
            )
        first_session = {s: by_subject[s][0] for s in subjects}
        folds = []
        for target_subject in subjects:
            sources = [first_session[s] for s in subjects if s != target_subject]
            folds.append((sources, first_session[target_subject]))
        return ProtocolPlan(LOSO, folds)

    if kind == CROSS_SESSION:
        offenders = [s for s in subjects if len(by_subject[s]) < 2]
        if offenders:
            raise ProtocolError(
                f"cross-session needs >= 2 sessions per subject; offenders: {offenders}"
            )
        folds = []
        for s in subjects:
            sessions = by_subject[s]
            folds.append((sessions[:-1], sessions[-1]))
        return ProtocolPlan(CROSS_SESSION, folds)

    raise ConfigError(f"unknown protocol kind '{kind}'")


def batcher(n_or_dataset, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """One epoch of shuffled index batches.

    A trailing batch of size 1 is dropped (train-mode normalization
    cannot use it); any other remainder is kept.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = n_or_dataset.n if isinstance(n_or_dataset, DomainDataset) else int(n_or_dataset)
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and batches[-1].size == 1:
        batches.pop()
    return batches
