"""Source pretraining and conditional adversarial adaptation.

Both phases use SGD with momentum and the inverse-power learning-rate decay
``base_lr * (1 + lr_gamma * iter) ** -lr_power``; layers marked ``head``
(bottleneck, classifier, discriminator) train at ``head_lr_multiplier`` times
that rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from .network import (
    AdaptationModel,
    Batch,
    Discriminator,
    LossSpec,
    NonFiniteLossError,
    backprop,
    bottleneck,
    classify,
    discriminate,
    init_model,
    outer_product,
)
from .selection import SplitUpdate

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite snapshot."""

    def __init__(self, message, last_good: Optional[AdaptationModel], term: str, iteration: int):
        super().__init__(message)
        self.last_good = last_good
        self.term = term
        self.iteration = iteration


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    lr_gamma: float = 0.001
    lr_power: float = 0.85
    momentum: float = 0.9
    labeled_batch: int = 64
    unlabeled_batch: int = 64
    iterations: int = 2000
    grl_lambda_max: float = 1.0
    grl_ramp: float = 10.0
    seed: int = 0
    head_lr_multiplier: float = 10.0
    weight_decay: float = 0.0
    freeze_first_layer: bool = False
    adversarial: bool = True
    log_every: int = 100

    def validate(self) -> None:
        if self.labeled_batch < 2 or self.labeled_batch % 2:
            raise ValueError(f"labeled_batch must be a positive even integer, got {self.labeled_batch}")
        if self.unlabeled_batch < 1:
            raise ValueError("unlabeled_batch must be positive")
        for name in ("base_lr", "lr_gamma", "head_lr_multiplier"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_power <= 1:
            raise ValueError(f"lr_power must be in (0, 1], got {self.lr_power}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.iterations < 1 or self.log_every < 1:
            raise ValueError("iterations and log_every must be positive")
        if self.grl_lambda_max < 0 or self.weight_decay < 0:
            raise ValueError("grl_lambda_max and weight_decay must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Metrics:
    iteration: int
    cls_loss: float
    dom_loss: float
    src_acc: float
    tgt_acc: float
    disc_acc: float
    lr: float
    lam: float

    def line(self) -> str:
        return (
            f"iter={self.iteration} cls_loss={self.cls_loss!r} dom_loss={self.dom_loss!r} "
            f"src_acc={self.src_acc!r} tgt_acc={self.tgt_acc!r} disc_acc={self.disc_acc!r} "
            f"lr={self.lr!r} lambda={self.lam!r}"
        )

    @classmethod
    def parse(cls, line: str) -> "Metrics":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(
            int(kv["iter"]), float(kv["cls_loss"]), float(kv["dom_loss"]), float(kv["src_acc"]),
            float(kv["tgt_acc"]), float(kv["disc_acc"]), float(kv["lr"]), float(kv["lambda"]),
        )


def lr_at(config: TrainConfig, iteration: int, head: bool = False) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    lr = config.base_lr * (1.0 + config.lr_gamma * iteration) ** (-config.lr_power)
    return lr * config.head_lr_multiplier if head else lr


def grl_lambda(config: TrainConfig, iteration: int) -> float:
    """Ramp ``lambda_max * (2 / (1 + exp(-ramp * progress)) - 1)``."""
    prog = iteration / config.iterations
    return config.grl_lambda_max * (2.0 / (1.0 + math.exp(-config.grl_ramp * prog)) - 1.0)


class SGDMomentum:
    """``v <- momentum * v - lr * g``; ``theta <- theta + v``, in place."""

    def __init__(self, params: list[np.ndarray], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lrs: list[float]) -> None:
        for p, v, g, lr in zip(self.params, self.velocity, grads, lrs):
            v *= self.momentum
            v -= lr * g
            p += v


def _param_list(layers) -> list[np.ndarray]:
    out = []
    for layer in layers:
        out.extend((layer.weight, layer.bias))
    return out


def _grad_list(grads, layers, weight_decay):
    out = []
    for (gw, gb), layer in zip(grads, layers):
        out.append(gw + weight_decay * layer.weight if weight_decay else gw)
        out.append(gb)
    return out


def _lr_list(layers, config, iteration, frozen=()):
    out = []
    for i, layer in enumerate(layers):
        lr = 0.0 if i in frozen else lr_at(config, iteration, layer.head)
        out.extend((lr, lr))
    return out


class EpochSampler:
    """Draw indices without replacement from a reshuffled permutation of ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty pool")
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def draw(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(k, self.n - self._pos)
            out.append(self._perm[self._pos : self._pos + take])
            self._pos += take
            k -= take
        return np.concatenate(out)


class BatchComposer:
    """Mini-batches for adaptation: half source, half promoted targets, plus
    ``unlabeled_batch`` rows from the remaining target pool.

    With no promoted targets the labeled half falls back to all-source and
    ``fallback`` is set. With no remaining targets the domain term is empty.
    """

    def __init__(self, split: SplitUpdate, config: TrainConfig, rng: np.random.Generator):
        self.split = split
        self.config = config
        src, prom = split.source_rows, split.promoted_rows
        if src.size == 0:
            raise ValueError("split has no source rows")
        self.fallback = prom.size == 0
        self._src_rows, self._prom_rows = src, prom
        self._src = EpochSampler(src.size, rng)
        self._prom = None if self.fallback else EpochSampler(prom.size, rng)
        n_unl = split.unlabeled_index.size
        self._unl = EpochSampler(n_unl, rng) if n_unl else None
        if self.fallback:
            log.info("no promoted targets: labeled batches are all-source")

    @property
    def has_unlabeled(self) -> bool:
        return self._unl is not None

    def compose(self) -> Batch:
        s = self.split
        half = self.config.labeled_batch // 2
        if self.fallback:
            rows = self._src_rows[self._src.draw(self.config.labeled_batch)]
        else:
            rows = np.concatenate([
                self._src_rows[self._src.draw(half)],
                self._prom_rows[self._prom.draw(half)],
            ])
        x = [s.labeled_x[rows]]
        labels = [s.labeled_y[rows]]
        domain = [s.domain_labels[rows]]
        if self._unl is not None:
            u = self._unl.draw(self.config.unlabeled_batch)
            x.append(s.unlabeled_x[u])
            labels.append(np.full(u.size, -1))
            domain.append(np.zeros(u.size, dtype=np.int64))
        return Batch(np.concatenate(x), np.concatenate(labels), np.concatenate(domain))


def compose_batch(composer: BatchComposer) -> Batch:
    return composer.compose()


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray


def evaluate(model: AdaptationModel, x, truth) -> EvalResult:
    """Argmax accuracy, per-class recall and confusion matrix (rows = truth)."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.argmax(classify(model, np.atleast_2d(x)), axis=1)
    c = model.class_count
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return EvalResult(float(np.mean(pred == truth)), per_class, conf)


def discriminator_accuracy(model: AdaptationModel, disc: Discriminator, split: SplitUpdate) -> float:
    """Balanced accuracy of ``disc`` (no dropout) on the split's domain labels.

    Source side is the labeled pool (source plus promoted targets); target
    side is the remaining unlabeled pool. Returns nan when a side is empty.
    """
    return side_accuracy(model, disc, split.labeled_x, split.unlabeled_x)


def side_accuracy(model: AdaptationModel, disc: Discriminator, source_x, target_x) -> float:
    """Mean of the per-side hit rates of ``disc`` at threshold 0.5."""
    if len(source_x) == 0 or len(target_x) == 0:
        return float("nan")
    accs = []
    for x, side in ((source_x, True), (target_x, False)):
        f = bottleneck(model, x)
        v = outer_product(f, classify(model, x)) if disc.condition == "product" else f
        accs.append(np.mean((discriminate(disc, v) > 0.5) == side))
    return float(np.mean(accs))


def _finite(layers) -> bool:
    return all(np.all(np.isfinite(p)) for p in _param_list(layers))


def pretrain(
    source,
    config: TrainConfig,
    model: Optional[AdaptationModel] = None,
    hidden=(64, 64),
    bottleneck_width: int = 16,
    target_eval: Optional[tuple[np.ndarray, np.ndarray]] = None,
    on_metrics: Optional[Callable[[Metrics], None]] = None,
) -> tuple[AdaptationModel, list[Metrics]]:
    """Minimize mean source cross-entropy with momentum SGD.

    Returns the initial adapted-from model and its metric trace. The model is
    initialized from ``config.seed`` unless one is passed in.
    """
    config.validate()
    if source.labels is None:
        raise ValueError("pretraining needs a labeled source set")
    init_rng, batch_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence([config.seed, 1]).spawn(2))
    if model is None:
        model = init_model(source.dim, source.class_count, hidden, bottleneck_width,
                           rng=init_rng, seed=config.seed)
    params = _param_list(model.layers)
    opt = SGDMomentum(params, config.momentum)
    frozen = (0,) if config.freeze_first_layer else ()
    sampler = EpochSampler(source.n, batch_rng)
    spec = LossSpec(cls_weight=1.0, dom_weight=0.0, grl_lambda=0.0)
    trace: list[Metrics] = []
    last_good = model.copy()
    window = []

    for it in range(config.iterations):
        rows = sampler.draw(config.labeled_batch)
        batch = Batch(source.features[rows], source.labels[rows], np.full(rows.size, -1))
        try:
            g = backprop(model, None, batch, spec)
        except NonFiniteLossError as err:
            raise TrainingDiverged(f"pretraining diverged at iteration {it}: {err}",
                                   last_good, err.term, it) from err
        window.append(g.cls_loss)
        opt.step(_grad_list(g.model, model.layers, config.weight_decay),
                 _lr_list(model.layers, config, it, frozen))
        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            if not _finite(model.layers):
                raise TrainingDiverged(f"non-finite parameters after iteration {it}",
                                       last_good, "classification", it)
            last_good = model.copy()
            m = Metrics(
                it + 1, float(np.mean(window)), 0.0,
                evaluate(model, source.features, source.labels).accuracy,
                evaluate(model, *target_eval).accuracy if target_eval else float("nan"),
                float("nan"), lr_at(config, it), 0.0,
            )
            window = []
            trace.append(m)
            if on_metrics:
                on_metrics(m)
    return model, trace


def adversarial_train(
    model: AdaptationModel,
    disc: Discriminator,
    split: SplitUpdate,
    config: TrainConfig,
    source_eval: Optional[tuple[np.ndarray, np.ndarray]] = None,
    target_eval: Optional[tuple[np.ndarray, np.ndarray]] = None,
    on_metrics: Optional[Callable[[Metrics], None]] = None,
) -> tuple[AdaptationModel, Discriminator, list[Metrics]]:
    """Joint classification + gradient-reversal adversarial training, in place.

    Source-side rows (source and promoted targets) carry domain label 1,
    remaining targets carry 0. With ``config.adversarial`` off, the
    discriminator is never evaluated and training is plain supervised
    learning on the labeled pool.
    """
    config.validate()
    batch_seq, drop_seq = np.random.SeedSequence([config.seed, 2]).spawn(2)
    composer = BatchComposer(split, config, np.random.default_rng(batch_seq))
    drop_rng = np.random.default_rng(drop_seq)
    use_disc = config.adversarial and composer.has_unlabeled
    if config.adversarial and not use_disc:
        log.warning("unlabeled pool is empty: adversarial term disabled")

    m_params = _param_list(model.layers)
    d_params = _param_list(disc.layers) if use_disc else []
    opt = SGDMomentum(m_params + d_params, config.momentum)
    frozen = (0,) if config.freeze_first_layer else ()
    trace: list[Metrics] = []
    cls_w, dom_w = [], []

    for it in range(config.iterations):
        batch = composer.compose()
        lam = grl_lambda(config, it) if use_disc else 0.0
        if not use_disc:
            batch.domain[:] = -1
        spec = LossSpec(1.0, 1.0, lam, train_mode=True)
        try:
            g = backprop(model, disc if use_disc else None, batch, spec, rng=drop_rng)
        except NonFiniteLossError as err:
            raise TrainingDiverged(f"adaptation diverged at iteration {it}: {err}",
                                   model.copy(), err.term, it) from err
        grads = _grad_list(g.model, model.layers, config.weight_decay)
        lrs = _lr_list(model.layers, config, it, frozen)
        if use_disc:
            grads += _grad_list(g.disc, disc.layers, config.weight_decay)
            lrs += _lr_list(disc.layers, config, it)
        opt.step(grads, lrs)
        cls_w.append(g.cls_loss)
        dom_w.append(g.dom_loss)

        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            if not _finite(model.layers) or (use_disc and not _finite(disc.layers)):
                raise TrainingDiverged(f"non-finite parameters after iteration {it}",
                                       None, "parameters", it)
            m = Metrics(
                it + 1, float(np.mean(cls_w)), float(np.mean(dom_w)),
                evaluate(model, *source_eval).accuracy if source_eval else float("nan"),
                evaluate(model, *target_eval).accuracy if target_eval else float("nan"),
                discriminator_accuracy(model, disc, split) if use_disc else float("nan"),
                lr_at(config, it), lam,
            )
            cls_w, dom_w = [], []
            trace.append(m)
            if on_metrics:
                on_metrics(m)
    return model, disc, trace
