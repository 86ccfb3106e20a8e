"""Synthetic domain-shift datasets and their plain-text file format.

Source data are isotropic Gaussian clusters placed on the vertices of a
regular polygon; the target domain is drawn from the same process with a
fresh random stream and then rotated and translated. Target labels are kept
out of the training file and written to a sibling ``.truth.csv`` file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass(frozen=True)
class ShiftSpec:
    class_count: int = 4
    samples_per_class_source: int = 150
    samples_per_class_target: int = 150
    class_center_radius: float = 4.0
    class_std: float = 1.0
    rotation_deg: float = 30.0
    translation: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    dim: int = 2

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.samples_per_class_source < 1 or self.samples_per_class_target < 1:
            raise ValueError("samples per class must be positive")
        if not self.class_center_radius > 0:
            raise ValueError(f"class_center_radius must be > 0, got {self.class_center_radius}")
        if not self.class_std > 0:
            raise ValueError(f"class_std must be > 0, got {self.class_std}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if len(self.translation) != 2:
            raise ValueError("translation must have two components")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(eq=False)
class LabeledDataset:
    """Feature matrix with optional labels.

    ``labels`` is ``None`` for an unlabeled target set; in that case
    ``ground_truth`` may carry the held-out evaluation labels, which never
    enter the training file.
    """

    features: np.ndarray
    labels: Optional[np.ndarray]
    domain: np.ndarray
    class_count: int
    ground_truth: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError("dataset needs at least one row and one column")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        self.domain = np.asarray(self.domain, dtype=object)
        if self.domain.shape != (n,):
            raise ValueError("domain must have one tag per row")
        bad = set(self.domain.tolist()) - set(DOMAINS)
        if bad:
            raise ValueError(f"unknown domain tags: {sorted(bad)}")
        self.labels = self._check_labels(self.labels, n, "labels")
        self.ground_truth = self._check_labels(self.ground_truth, n, "ground_truth")

    def _check_labels(self, labels, n, name):
        if labels is None:
            return None
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"{name} must have one entry per row")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(f"{name} out of range [0, {self.class_count})")
        return labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (
            self.class_count == other.class_count
            and same(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self.ground_truth, other.ground_truth)
            and self.domain.tolist() == other.domain.tolist()
        )


def class_centers(class_count: int, radius: float) -> np.ndarray:
    """Vertices of a regular ``class_count``-gon, first vertex on the +x axis."""
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _draw(spec: ShiftSpec, per_class: int, rng: np.random.Generator):
    centers = class_centers(spec.class_count, spec.class_center_radius)
    labels = np.repeat(np.arange(spec.class_count), per_class)
    x = np.empty((labels.size, spec.dim))
    x[:, :2] = centers[labels] + spec.class_std * rng.standard_normal((labels.size, 2))
    if spec.dim > 2:
        x[:, 2:] = spec.class_std * rng.standard_normal((labels.size, spec.dim - 2))
    order = rng.permutation(labels.size)
    return x[order], labels[order]


def generate_pair(spec: ShiftSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw a labeled source set and a shifted, unlabeled target set.

    The target's true labels are attached as ``ground_truth`` only.
    """
    spec.validate()
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    xs, ys = _draw(spec, spec.samples_per_class_source, np.random.default_rng(src_seq))
    xt, yt = _draw(spec, spec.samples_per_class_target, np.random.default_rng(tgt_seq))

    theta = math.radians(spec.rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    xt[:, :2] = xt[:, :2] @ rot.T + np.asarray(spec.translation, dtype=np.float64)

    source = LabeledDataset(xs, ys, np.full(ys.size, SOURCE, dtype=object), spec.class_count)
    target = LabeledDataset(
        xt, None, np.full(yt.size, TARGET, dtype=object), spec.class_count, ground_truth=yt
    )
    return source, target


def truth_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".truth.csv")


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write ``ds`` as ``label,domain,f_0,...`` rows.

    Unlabeled rows carry label ``-1``. Ground-truth labels, if present, go to
    the sibling file returned by :func:`truth_path`.
    """
    path = Path(path)
    labels = ds.labels if ds.labels is not None else np.full(ds.n, -1, dtype=np.int64)
    lines = [
        f"# class_count={ds.class_count}",
        ",".join(["label", "domain"] + [f"f_{j}" for j in range(ds.dim)]),
    ]
    for lab, dom, row in zip(labels.tolist(), ds.domain.tolist(), ds.features.tolist()):
        lines.append(",".join([str(lab), dom] + [repr(v) for v in row]))
    path.write_text("\n".join(lines) + "\n")

    tpath = truth_path(path)
    if ds.ground_truth is not None:
        tpath.write_text(
            f"# class_count={ds.class_count}\nlabel\n"
            + "".join(f"{v}\n" for v in ds.ground_truth.tolist())
        )
    elif tpath.exists():
        tpath.unlink()


def _read_header(lines, path):
    if not lines or not lines[0].startswith("# class_count="):
        raise DatasetFormatError(f"{path}:1: missing '# class_count=' header")
    try:
        c = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise DatasetFormatError(f"{path}:1: bad class_count header") from None
    if c < 1:
        raise DatasetFormatError(f"{path}:1: class_count must be positive")
    return c


def _parse_label(tok, c, path, lineno, allow_unlabeled):
    try:
        lab = int(tok)
    except ValueError:
        raise DatasetFormatError(f"{path}:{lineno}: label {tok!r} is not an integer") from None
    if lab == -1 and allow_unlabeled:
        return lab
    if not 0 <= lab < c:
        raise DatasetFormatError(
            f"{path}:{lineno}: label {lab} out of range [0, {c})"
        )
    return lab


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    c = _read_header(lines, path)
    if len(lines) < 2 or not lines[1].startswith("label,domain"):
        raise DatasetFormatError(f"{path}:2: missing column header")
    width = len(lines[1].split(","))
    if width < 3:
        raise DatasetFormatError(f"{path}:2: no feature columns")

    labels, domains, rows = [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        toks = line.split(",")
        if len(toks) != width:
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {width} columns, found {len(toks)}"
            )
        labels.append(_parse_label(toks[0], c, path, lineno, allow_unlabeled=True))
        if toks[1] not in DOMAINS:
            raise DatasetFormatError(f"{path}:{lineno}: unknown domain {toks[1]!r}")
        domains.append(toks[1])
        try:
            row = [float(t) for t in toks[2:]]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: malformed feature value") from None
        if not all(math.isfinite(v) for v in row):
            raise DatasetFormatError(f"{path}:{lineno}: non-finite feature value")
        rows.append(row)
    if not rows:
        raise DatasetFormatError(f"{path}: no rows")

    labels = np.array(labels, dtype=np.int64)
    unlabeled = labels == -1
    if unlabeled.any() and not unlabeled.all():
        raise DatasetFormatError(f"{path}: mix of labeled and unlabeled rows")

    truth = None
    tpath = truth_path(path)
    if tpath.exists():
        tlines = tpath.read_text().splitlines()
        if _read_header(tlines, tpath) != c:
            raise DatasetFormatError(f"{tpath}:1: class_count disagrees with {path.name}")
        truth = [
            _parse_label(t, c, tpath, i, allow_unlabeled=False)
            for i, t in enumerate(tlines[2:], start=3)
            if t.strip()
        ]
        if len(truth) != len(rows):
            raise DatasetFormatError(
                f"{tpath}: {len(truth)} labels for {len(rows)} rows in {path.name}"
            )
        truth = np.array(truth, dtype=np.int64)

    return LabeledDataset(
        np.array(rows, dtype=np.float64),
        None if unlabeled.all() else labels,
        np.array(domains, dtype=object),
        c,
        ground_truth=truth,
    )
