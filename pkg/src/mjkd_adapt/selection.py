"""Class-balanced promotion of confidently pseudo-labeled target samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_synth import LabeledDataset
from .network import AdaptationModel, classify

PROMOTED = "promoted_target"
SOURCE_ROW = "source"


class SelectionError(ValueError):
    pass


def pseudo_label(model: AdaptationModel, target) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class and full probability vector for every target row.

    Ties go to the smaller class index.
    """
    x = target.features if isinstance(target, LabeledDataset) else target
    probs = classify(model, np.atleast_2d(x))
    return np.argmax(probs, axis=1), probs


@dataclass
class SelectionReport:
    class_count: int
    proportion: float
    k: int
    n_targets: int
    # ranked[m] = (target indices, R values), sorted by (R, index)
    ranked: list[tuple[np.ndarray, np.ndarray]]
    promoted_indices: np.ndarray
    promoted_labels: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.promoted_labels, minlength=self.class_count)

    @property
    def shortfall(self) -> np.ndarray:
        return self.k - self.counts

    def precision(self, truth) -> float:
        """Fraction of promoted pseudo-labels that match ``truth``; nan if none."""
        if self.promoted_indices.size == 0:
            return float("nan")
        truth = np.asarray(truth)
        return float(np.mean(truth[self.promoted_indices] == self.promoted_labels))


def select_balanced(pseudo_labels, r_values, proportion: float, class_count: int) -> SelectionReport:
    """Take the ``k`` smallest-R members of every predicted class.

    ``k = floor(proportion * n_t / c)``. Classes with fewer than ``k``
    members contribute all of them; no class is backfilled from another.
    """
    if not 0.0 < proportion <= 1.0:
        raise SelectionError(f"proportion must be in (0, 1], got {proportion}")
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    r_values = np.asarray(r_values, dtype=np.float64)
    if pseudo_labels.shape != r_values.shape or pseudo_labels.ndim != 1:
        raise SelectionError("need one R value per pseudo-label")
    if not np.all(np.isfinite(r_values)):
        raise SelectionError("R values must be finite")
    n_t = pseudo_labels.size
    k = math.floor(proportion * n_t / class_count)

    ranked, chosen, chosen_labels = [], [], []
    for m in range(class_count):
        idx = np.flatnonzero(pseudo_labels == m)
        order = np.lexsort((idx, r_values[idx]))
        idx = idx[order]
        ranked.append((idx, r_values[idx]))
        take = idx[: min(k, idx.size)]
        chosen.append(take)
        chosen_labels.append(np.full(take.size, m, dtype=np.int64))
    return SelectionReport(
        class_count, float(proportion), k, n_t, ranked,
        np.concatenate(chosen).astype(np.int64), np.concatenate(chosen_labels),
    )


@dataclass
class SplitUpdate:
    """Labeled pool ``S u T^p`` and unlabeled pool ``T - T^p``.

    ``labeled_origin`` holds each labeled row's index in its original dataset
    (source or target, per ``provenance``); ``unlabeled_index`` holds target
    indices of the rows still unlabeled.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    provenance: np.ndarray
    labeled_origin: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_index: np.ndarray
    class_count: int
    n_source: int = field(default=0)
    n_target: int = field(default=0)

    @property
    def domain_labels(self) -> np.ndarray:
        # promoted targets sit on the source side of the adversarial game
        return np.ones(self.labeled_y.size, dtype=np.int64)

    @property
    def source_rows(self) -> np.ndarray:
        return np.flatnonzero(self.provenance == SOURCE_ROW)

    @property
    def promoted_rows(self) -> np.ndarray:
        return np.flatnonzero(self.provenance == PROMOTED)


def initial_split(source: LabeledDataset, target: LabeledDataset) -> SplitUpdate:
    if source.labels is None:
        raise SelectionError("source dataset must be labeled")
    return SplitUpdate(
        source.features.copy(), source.labels.copy(),
        np.full(source.n, SOURCE_ROW, dtype=object), np.arange(source.n),
        target.features.copy(), np.arange(target.n),
        source.class_count, source.n, target.n,
    )


def update_split(split: SplitUpdate, report: SelectionReport) -> SplitUpdate:
    """Move the report's promoted targets from the unlabeled to the labeled pool.

    Fails if any promoted index is no longer in the unlabeled pool, so the
    same report cannot be applied twice.
    """
    idx = report.promoted_indices
    if idx.size and (idx.min() < 0 or idx.max() >= split.n_target):
        raise SelectionError(f"promoted index out of range [0, {split.n_target})")
    if np.unique(idx).size != idx.size:
        raise SelectionError("promoted indices are not distinct")
    pos = {int(t): i for i, t in enumerate(split.unlabeled_index)}
    missing = [int(t) for t in idx if int(t) not in pos]
    if missing:
        raise SelectionError(f"target indices already moved out of the unlabeled pool: {missing[:5]}")
    rows = np.array([pos[int(t)] for t in idx], dtype=np.int64)
    keep = np.ones(split.unlabeled_index.size, dtype=bool)
    keep[rows] = False
    return SplitUpdate(
        np.concatenate([split.labeled_x, split.unlabeled_x[rows]]),
        np.concatenate([split.labeled_y, report.promoted_labels]),
        np.concatenate([split.provenance, np.full(idx.size, PROMOTED, dtype=object)]),
        np.concatenate([split.labeled_origin, idx]),
        split.unlabeled_x[keep],
        split.unlabeled_index[keep],
        split.class_count, split.n_source, split.n_target,
    )


def apply_selection(source: LabeledDataset, target: LabeledDataset,
                    report: SelectionReport) -> SplitUpdate:
    return update_split(initial_split(source, target), report)


def save_report(report: SelectionReport, path) -> None:
    """Audit table: one row per ranked target, ``class,index,R,rank,selected``."""
    selected = set(report.promoted_indices.tolist())
    lines = [
        f"# class_count={report.class_count} proportion={report.proportion!r} "
        f"k={report.k} n_targets={report.n_targets}",
        "class,index,R,rank,selected",
    ]
    for m, (idx, r) in enumerate(report.ranked):
        for rank, (i, v) in enumerate(zip(idx.tolist(), r.tolist())):
            lines.append(f"{m},{i},{v!r},{rank},{int(i in selected)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> SelectionReport:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise SelectionError(f"{path}:1: missing report header")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    c = int(meta["class_count"])
    per_class = [([], [], []) for _ in range(c)]
    for lineno, line in enumerate(lines[2:], start=3):
        toks = line.split(",")
        if len(toks) != 5:
            raise SelectionError(f"{path}:{lineno}: expected 5 columns")
        m, i, r, _, sel = int(toks[0]), int(toks[1]), float(toks[2]), toks[3], int(toks[4])
        if not 0 <= m < c:
            raise SelectionError(f"{path}:{lineno}: class {m} out of range")
        per_class[m][0].append(i)
        per_class[m][1].append(r)
        per_class[m][2].append(sel)
    ranked, chosen, labels = [], [], []
    for m, (idx, r, sel) in enumerate(per_class):
        idx = np.array(idx, dtype=np.int64)
        ranked.append((idx, np.array(r, dtype=np.float64)))
        take = idx[np.array(sel, dtype=bool)] if idx.size else idx
        chosen.append(take)
        labels.append(np.full(take.size, m, dtype=np.int64))
    return SelectionReport(
        c, float(meta["proportion"]), int(meta["k"]), int(meta["n_targets"]), ranked,
        np.concatenate(chosen).astype(np.int64), np.concatenate(labels),
    )
