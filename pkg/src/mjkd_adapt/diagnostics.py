"""Discrete checks of the optimal-discriminator / Jensen-Shannon identity.

For joint masses ``gs`` and ``gt`` on a shared finite grid the best
discriminator is ``gs / (gs + gt)`` cell by cell, and the value function at
that discriminator equals ``-log 4 + 2 JSD(gs || gt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import AdaptationModel, bottleneck, classify, outer_product
from .selection import SplitUpdate

LOG4 = math.log(4.0)


@dataclass
class DiscreteJoint:
    """Probability mass over ``(feature_bin, class)`` cells."""

    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.atleast_2d(np.asarray(self.mass, dtype=np.float64))
        if self.mass.ndim != 2:
            raise ValueError("mass must be a (bins, classes) table")
        if np.any(self.mass < 0) or not np.all(np.isfinite(self.mass)):
            raise ValueError("masses must be finite and nonnegative")
        if abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError(f"masses sum to {self.mass.sum()!r}, not 1")

    @classmethod
    def from_counts(cls, counts) -> "DiscreteJoint":
        counts = np.asarray(counts, dtype=np.float64)
        return cls(counts / counts.sum())

    @property
    def bins(self) -> int:
        return self.mass.shape[0]

    @property
    def classes(self) -> int:
        return self.mass.shape[1]


def _check_grid(gs: DiscreteJoint, gt: DiscreteJoint):
    if gs.mass.shape != gt.mass.shape:
        raise ValueError(f"grid mismatch: {gs.mass.shape} vs {gt.mass.shape}")


def optimal_discriminator(gs: DiscreteJoint, gt: DiscreteJoint) -> np.ndarray:
    """``gs / (gs + gt)`` per cell; 0.5 where both masses vanish."""
    _check_grid(gs, gt)
    tot = gs.mass + gt.mass
    out = np.full(tot.shape, 0.5)
    nz = tot > 0
    out[nz] = gs.mass[nz] / tot[nz]
    return out


def _xlogy(x, y, what):
    pos = x > 0
    if np.any(y[pos] <= 0):
        raise ValueError(f"log of 0 where {what} mass is positive")
    out = np.zeros_like(x)
    out[pos] = x[pos] * np.log(y[pos])
    return out


def value_function(gs: DiscreteJoint, gt: DiscreteJoint, d) -> float:
    """``sum gs log d + sum gt log(1 - d)`` with natural logs."""
    _check_grid(gs, gt)
    d = np.asarray(d, dtype=np.float64).reshape(gs.mass.shape)
    return float(np.sum(_xlogy(gs.mass, d, "source")) + np.sum(_xlogy(gt.mass, 1.0 - d, "target")))


def jsd(gs: DiscreteJoint, gt: DiscreteJoint) -> float:
    """Jensen-Shannon divergence in nats; ``0 log 0 = 0``."""
    _check_grid(gs, gt)
    m = 0.5 * (gs.mass + gt.mass)

    def kl(p):
        pos = p > 0
        return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(m[pos]))))

    return max(0.0, 0.5 * kl(gs.mass) + 0.5 * kl(gt.mass))


def fit_tabular_discriminator(gs: DiscreteJoint, gt: DiscreteJoint, iterations: int = 200) -> np.ndarray:
    """Maximize the value function over one free logit per cell by Newton steps.

    Starts from logit 0 (d = 0.5). Cells with no mass on either side stay at
    0.5; one-sided cells drift toward 0 or 1.
    """
    _check_grid(gs, gt)
    a, b = gs.mass, gt.mass
    tot = a + b
    logit = np.zeros_like(a)
    for _ in range(iterations):
        d = 1.0 / (1.0 + np.exp(-logit))
        grad = a - tot * d
        hess = tot * d * (1.0 - d)
        step = np.where(hess > 0, grad / np.where(hess > 0, hess, 1.0), 0.0)
        logit = np.clip(logit + np.clip(step, -4.0, 4.0), -40.0, 40.0)
    return 1.0 / (1.0 + np.exp(-logit))


@dataclass
class TheoryReport:
    bins_per_axis: int
    samples_source: int
    samples_target: int
    reliable_cells: int
    unreliable_cells: int
    max_deviation: float
    value_gap: float
    jsd: float
    value_at_fit: float
    closed_form_value: float

    def lines(self) -> list[str]:
        return [f"{k}={v!r}" for k, v in self.__dict__.items()]


def _joint_counts(v, cls, edges, class_count):
    ix = np.clip(np.searchsorted(edges[0], v[:, 0], side="right") - 1, 0, len(edges[0]) - 2)
    iy = np.clip(np.searchsorted(edges[1], v[:, 1], side="right") - 1, 0, len(edges[1]) - 2)
    nb = len(edges[0]) - 1
    counts = np.zeros((nb * nb, class_count))
    np.add.at(counts, (ix * nb + iy, cls), 1.0)
    return counts


def empirical_theory_check(
    model: AdaptationModel,
    split: SplitUpdate,
    bins_per_axis: int = 6,
    min_count: int = 5,
    seed: int = 0,
    source_x=None,
    target_x=None,
) -> TheoryReport:
    """Bin conditioned outputs on a 2-D grid and test the closed forms.

    Rows default to the split's two adversarial sides (labeled pool vs
    remaining targets); pass ``source_x``/``target_x`` to compare other sets.
    Conditioned vectors ``f (x) p`` are randomly projected to 2-D, binned on a
    fixed grid spanning both sets, and crossed with the argmax class. A
    tabular discriminator is fitted on the resulting masses. Cells with fewer
    than ``min_count`` samples are counted as unreliable and left out of
    ``max_deviation``.
    """
    xs = split.labeled_x if source_x is None else np.atleast_2d(source_x)
    xt = split.unlabeled_x if target_x is None else np.atleast_2d(target_x)
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("theory check needs samples on both sides")

    def conditioned(x):
        p = classify(model, x)
        return outer_product(bottleneck(model, x), p), np.argmax(p, axis=1)

    vs, cs = conditioned(xs)
    vt, ct = conditioned(xt)
    proj = np.random.default_rng(seed).standard_normal((vs.shape[1], 2))
    ps, pt = vs @ proj, vt @ proj
    both = np.vstack([ps, pt])
    edges = []
    for j in range(2):
        lo, hi = both[:, j].min(), both[:, j].max()
        if hi <= lo:
            hi = lo + 1.0
        edges.append(np.linspace(lo, hi, bins_per_axis + 1))
    c = model.class_count
    cnt_s = _joint_counts(ps, cs, edges, c)
    cnt_t = _joint_counts(pt, ct, edges, c)
    gs, gt = DiscreteJoint.from_counts(cnt_s), DiscreteJoint.from_counts(cnt_t)

    d_star = optimal_discriminator(gs, gt)
    d_fit = fit_tabular_discriminator(gs, gt)
    occupied = (cnt_s + cnt_t) > 0
    reliable = (cnt_s + cnt_t) >= min_count
    dev = np.abs(d_fit - d_star)[reliable]
    v_fit = value_function(gs, gt, np.clip(d_fit, 1e-300, 1 - 1e-16))
    div = jsd(gs, gt)
    closed = -LOG4 + 2.0 * div
    return TheoryReport(
        bins_per_axis, xs.shape[0], xt.shape[0], int(reliable.sum()),
        int((occupied & ~reliable).sum()),
        float(dev.max()) if dev.size else 0.0,
        float(abs(v_fit - closed)), div, v_fit, closed,
    )
