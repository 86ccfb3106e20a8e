"""Multi-layer joint kernelized distance (MJKD) between one target sample and
a source class, and the relative distance used to rank pseudo-labels.

Each layer gets a Gaussian kernel averaged over a set of bandwidths
``gamma0 * mult``; the joint kernel across layers is the product of the
per-layer kernels. A target sample is treated as a one-point distribution, so
its squared MMD to source class ``m`` is::

    k(t, t) + mean_{i,k} k(s_i, s_k) - 2 mean_i k(t, s_i)

with ``k(t, t) = 1`` for Gaussian kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .network import FeatureStack

DEFAULT_MULTIPLIERS = (1.0, 2.0, 4.0, 0.5, 0.25)
BANDWIDTH_RULES = ("mean_cross_pair_sqdist", "fixed")

# rounding slack allowed below zero before clamping a squared distance
NEGATIVE_SLACK = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    base_bandwidth_rule: str = "mean_cross_pair_sqdist"
    fixed_gamma: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        if not self.multipliers or any(not m > 0 for m in self.multipliers):
            raise ValueError("multipliers must be a nonempty set of positive reals")
        if self.base_bandwidth_rule not in BANDWIDTH_RULES:
            raise ValueError(f"unknown bandwidth rule {self.base_bandwidth_rule!r}")
        if not self.fixed_gamma > 0:
            raise ValueError("fixed_gamma must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


def gaussian_kernel(x, y, gamma: float) -> float:
    """``exp(-||x - y||^2 / gamma)``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(diff.ravel(), diff.ravel()) / gamma))


def base_bandwidth(a, b, epsilon: float = 1e-12) -> float:
    """Mean squared Euclidean distance over all cross pairs of ``a`` and ``b``.

    Falls back to ``epsilon`` when every pair coincides.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("base_bandwidth needs two nonempty sets")
    # mean_{i,j} ||a_i - b_j||^2 without forming the n_a x n_b matrix
    ca = a - a.mean(axis=0)
    cb = b - b.mean(axis=0)
    mu = a.mean(axis=0) - b.mean(axis=0)
    g = float(
        np.einsum("ij,ij->", ca, ca) / a.shape[0]
        + np.einsum("ij,ij->", cb, cb) / b.shape[0]
        + np.dot(mu, mu)
    )
    return g if g > 0 else epsilon


def _averaged_kernel(sqdist, gamma0: float, multipliers) -> np.ndarray:
    acc = np.zeros_like(sqdist, dtype=np.float64)
    for m in multipliers:
        acc += np.exp(-sqdist / (gamma0 * m))
    return acc / len(multipliers)


def multi_kernel(x, y, gamma0: float, spec: KernelSpec = KernelSpec()) -> float:
    """Gaussian kernel averaged over bandwidths ``gamma0 * multiplier``."""
    if not gamma0 > 0:
        raise ValueError(f"gamma0 must be > 0, got {gamma0}")
    diff = np.asarray(x, dtype=np.float64).ravel() - np.asarray(y, dtype=np.float64).ravel()
    return float(_averaged_kernel(np.dot(diff, diff), gamma0, spec.multipliers))


def _layer_rows(stack: FeatureStack):
    if stack.n != 1:
        raise ValueError("expected a single-example feature stack")
    return [a[0] for a in stack.acts]


def joint_kernel(
    a: FeatureStack, b: FeatureStack, bandwidths: Sequence[float], spec: KernelSpec = KernelSpec()
) -> float:
    """Product over layers of the per-layer multi-bandwidth kernel."""
    if a.layer_ids != b.layer_ids:
        raise ValueError(f"layer ranges differ: {a.layer_ids} vs {b.layer_ids}")
    if len(bandwidths) != len(a.layer_ids):
        raise ValueError("need one bandwidth per layer")
    out = 1.0
    for xa, xb, g in zip(_layer_rows(a), _layer_rows(b), bandwidths):
        out *= multi_kernel(xa, xb, g, spec)
    return out


def layer_bandwidths(
    source: FeatureStack, target: FeatureStack, spec: KernelSpec = KernelSpec()
) -> tuple[float, ...]:
    """Per-layer base bandwidth shared by all classes in one selection round."""
    if spec.base_bandwidth_rule == "fixed":
        return tuple(spec.fixed_gamma for _ in source.layer_ids)
    if source.layer_ids != target.layer_ids:
        raise ValueError("source and target stacks cover different layers")
    return tuple(base_bandwidth(s, t, spec.epsilon) for s, t in zip(source.acts, target.acts))


@dataclass
class CategoryBank:
    """Source feature stacks grouped by class, with per-layer bandwidths.

    ``self_terms[m]`` caches ``mean_{i,k} prod_l k^l(s_i, s_k)`` for class m.
    """

    classes: list[FeatureStack]
    bandwidths: tuple[float, ...]
    spec: KernelSpec = field(default_factory=KernelSpec)
    self_terms: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("category bank needs at least one class")
        for m, stack in enumerate(self.classes):
            if stack.n == 0:
                raise ValueError(f"source class {m} has no samples")
        ids = self.classes[0].layer_ids
        if any(s.layer_ids != ids for s in self.classes):
            raise ValueError("class stacks cover different layers")
        if len(self.bandwidths) != len(ids) or any(not g > 0 for g in self.bandwidths):
            raise ValueError("need one positive bandwidth per layer")
        self.bandwidths = tuple(float(g) for g in self.bandwidths)
        self.self_terms = np.array([self._gram(s, s).mean() for s in self.classes])

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return self.classes[0].layer_ids

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def _gram(self, a: FeatureStack, b: FeatureStack) -> np.ndarray:
        if a.layer_ids != self.layer_ids or b.layer_ids != self.layer_ids:
            raise ValueError(f"layer range {a.layer_ids} does not match bank {self.layer_ids}")
        k = np.ones((a.n, b.n))
        for xa, xb, g in zip(a.acts, b.acts, self.bandwidths):
            k *= _averaged_kernel(cdist(xa, xb, "sqeuclidean"), g, self.spec.multipliers)
        return k

    def distances(self, targets: FeatureStack, clamp: bool = True) -> np.ndarray:
        """MJKD of every target to every class, shape ``(n_t, c)``."""
        d = np.empty((targets.n, self.class_count))
        for m, stack in enumerate(self.classes):
            cross = self._gram(targets, stack).mean(axis=1)
            d[:, m] = 1.0 + self.self_terms[m] - 2.0 * cross
        return _clamp(d) if clamp else d


def _clamp(d):
    worst = np.min(d) if np.size(d) else 0.0
    if worst < -NEGATIVE_SLACK:
        raise FloatingPointError(f"MJKD went negative ({worst:.3e}) beyond rounding slack")
    return np.maximum(d, 0.0)


def build_bank(
    source: FeatureStack,
    labels,
    class_count: int,
    target: Optional[FeatureStack] = None,
    spec: KernelSpec = KernelSpec(),
) -> CategoryBank:
    """Group source stacks by label; bandwidths come from source vs ``target``."""
    labels = np.asarray(labels)
    classes = []
    for m in range(class_count):
        idx = np.flatnonzero(labels == m)
        if idx.size == 0:
            raise ValueError(f"source class {m} has no samples")
        classes.append(source[idx])
    if spec.base_bandwidth_rule == "fixed":
        bw = layer_bandwidths(source, source, spec)
    else:
        if target is None:
            raise ValueError("mean_cross_pair_sqdist bandwidths need target features")
        bw = layer_bandwidths(source, target, spec)
    return CategoryBank(classes, bw, spec)


def mjkd(t: FeatureStack, bank: CategoryBank, cls: int, spec: Optional[KernelSpec] = None,
         clamp: bool = True) -> float:
    """Squared joint-kernel MMD between one target sample and source class ``cls``."""
    if spec is not None and spec != bank.spec:
        raise ValueError("kernel spec differs from the one the bank was built with")
    if t.n != 1:
        raise ValueError("mjkd takes a single target sample")
    if not 0 <= cls < bank.class_count:
        raise ValueError(f"class {cls} not in bank")
    stack = bank.classes[cls]
    cross = bank._gram(t, stack).mean()
    d = 1.0 + bank.self_terms[cls] - 2.0 * cross
    return float(_clamp(np.array([d]))[0]) if clamp else float(d)


def relative_distances(dist: np.ndarray, predicted, epsilon: float = 1e-12) -> np.ndarray:
    """Vectorized relative distance from an ``(n, c)`` MJKD matrix.

    ``R_j = sum_m' d[j, pred_j] / (d[j, m'] + epsilon)``.
    """
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    predicted = np.asarray(predicted, dtype=np.int64).reshape(dist.shape[0])
    own = dist[np.arange(dist.shape[0]), predicted]
    return own * np.sum(1.0 / (dist + epsilon), axis=1)


def relative_distance(t: FeatureStack, predicted: int, bank: CategoryBank,
                      spec: Optional[KernelSpec] = None) -> float:
    """Relative distance of one target sample predicted as class ``predicted``."""
    eps = (spec or bank.spec).epsilon
    d = np.array([[mjkd(t, bank, m, spec) for m in range(bank.class_count)]])
    return float(relative_distances(d, [predicted], eps)[0])
