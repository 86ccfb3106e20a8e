"""Dense feed-forward networks with hand-written backpropagation.

The generator is a stack of dense layers ending in a bottleneck ``f`` plus a
softmax head ``p``. The discriminator sees the flattened outer product
``f (x) p`` (or ``f`` alone) and is coupled to the generator through a
gradient reversal layer, so one backward pass yields the descent direction
for the discriminator and the reversed, lambda-scaled direction for the
generator.

Weights are stored as ``(fan_in, fan_out)`` matrices and all batch arrays are
row-major ``(n, width)``.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "linear")
CONDITIONS = ("product", "features_only")


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to inf or nan."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss: {value!r}")
        self.term = term
        self.value = value


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    head: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("dense layer weight/bias shapes disagree")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


def glorot_dense(fan_in, fan_out, rng, activation="relu", head=False) -> Dense:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Dense(w, np.zeros(fan_out), activation, head)


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def _act_grad(z, g, activation):
    return g * (z > 0.0) if activation == "relu" else g


@dataclass
class AdaptationModel:
    """Feature extractor (ending in the bottleneck) plus a linear softmax head.

    Layer ids for feature stacks: 0 is the raw input, ``1..len(extractor)``
    are extractor outputs; the last extractor layer is the bottleneck.
    """

    extractor: list[Dense]
    classifier: Dense
    feature_range: tuple[int, int]
    seed: Optional[int] = None

    def __post_init__(self):
        lo, hi = self.feature_range
        if not 0 <= lo <= hi <= len(self.extractor):
            raise ValueError(f"feature_range {self.feature_range} outside 0..{len(self.extractor)}")
        for a, b in zip(self.extractor, self.extractor[1:] + [self.classifier]):
            if a.fan_out != b.fan_in:
                raise ValueError("consecutive layer widths disagree")

    @property
    def layers(self) -> list[Dense]:
        return self.extractor + [self.classifier]

    @property
    def layer_widths(self) -> list[int]:
        return [self.extractor[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.extractor[0].fan_in

    @property
    def bottleneck_dim(self) -> int:
        return self.extractor[-1].fan_out

    @property
    def class_count(self) -> int:
        return self.classifier.fan_out

    def copy(self) -> "AdaptationModel":
        return copy.deepcopy(self)


@dataclass
class Discriminator:
    layers: list[Dense]
    dropout: float = 0.5
    condition: str = "product"

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.layers[-1].fan_out != 1:
            raise ValueError("discriminator must end in a single output")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    def copy(self) -> "Discriminator":
        return copy.deepcopy(self)


def init_model(
    input_dim: int,
    class_count: int,
    hidden: Sequence[int] = (64, 64),
    bottleneck: int = 16,
    rng: Optional[np.random.Generator] = None,
    feature_range: Optional[tuple[int, int]] = None,
    seed: Optional[int] = None,
) -> AdaptationModel:
    """Glorot-uniform initialized generator; biases start at zero.

    The default feature range covers every hidden layer plus the bottleneck.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, bottleneck]
    extractor = [
        glorot_dense(a, b, rng, "relu", head=(i == len(widths) - 2))
        for i, (a, b) in enumerate(zip(widths, widths[1:]))
    ]
    classifier = glorot_dense(bottleneck, class_count, rng, "linear", head=True)
    if feature_range is None:
        feature_range = (1, len(extractor))
    return AdaptationModel(extractor, classifier, tuple(feature_range), seed)


def init_discriminator(
    bottleneck: int,
    class_count: int,
    hidden: int = 32,
    dropout: float = 0.5,
    condition: str = "product",
    rng: Optional[np.random.Generator] = None,
) -> Discriminator:
    in_dim = bottleneck * class_count if condition == "product" else bottleneck
    if rng is None:
        rng = np.random.default_rng()
    layers = [
        glorot_dense(in_dim, hidden, rng, "relu", head=True),
        glorot_dense(hidden, hidden, rng, "relu", head=True),
        glorot_dense(hidden, 1, rng, "linear", head=True),
    ]
    return Discriminator(layers, dropout, condition)


# --------------------------------------------------------------------------
# forward passes


@dataclass
class FeatureStack:
    """Activations of layers ``layer_ids`` for a batch of examples.

    ``acts[i]`` has shape ``(n, width_i)``; a single example is a batch of 1.
    """

    layer_ids: tuple[int, ...]
    acts: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.layer_ids = tuple(int(i) for i in self.layer_ids)
        self.acts = tuple(np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in self.acts)
        if len(self.layer_ids) != len(self.acts) or not self.acts:
            raise ValueError("need one activation block per layer id")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ValueError("layer ids must be strictly increasing")
        n = self.acts[0].shape[0]
        if any(a.ndim != 2 or a.shape[0] != n for a in self.acts):
            raise ValueError("activation blocks disagree on batch size")

    @property
    def n(self) -> int:
        return self.acts[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(a.shape[1] for a in self.acts)

    def __len__(self):
        return self.n

    def __getitem__(self, idx) -> "FeatureStack":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return FeatureStack(self.layer_ids, tuple(a[idx] for a in self.acts))

    def scaled(self, alpha: float) -> "FeatureStack":
        return FeatureStack(self.layer_ids, tuple(alpha * a for a in self.acts))


def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected input width {width}, got shape {np.shape(x)}")
    return x


def _extract(model: AdaptationModel, x):
    hs, zs = [x], []
    h = x
    for layer in model.extractor:
        z = h @ layer.weight + layer.bias
        h = _act(z, layer.activation)
        zs.append(z)
        hs.append(h)
    return hs, zs


def forward_features(model: AdaptationModel, x) -> FeatureStack:
    """Activations for the model's feature range.

    The range always ends at or before the bottleneck; the bottleneck output is
    the last block when the range reaches it (the default).
    """
    x = _as_batch(x, model.input_dim)
    hs, _ = _extract(model, x)
    lo, hi = model.feature_range
    return FeatureStack(tuple(range(lo, hi + 1)), tuple(hs[lo : hi + 1]))


def bottleneck(model: AdaptationModel, x) -> np.ndarray:
    hs, _ = _extract(model, _as_batch(x, model.input_dim))
    return hs[-1]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def classify(model: AdaptationModel, x) -> np.ndarray:
    """Softmax class probabilities; a 1-D input gives a 1-D output."""
    single = np.ndim(x) == 1
    hs, _ = _extract(model, _as_batch(x, model.input_dim))
    p = softmax(hs[-1] @ model.classifier.weight + model.classifier.bias)
    return p[0] if single else p


def outer_product(f, p) -> np.ndarray:
    """Flattened outer product, ``out[..., i*c + j] = f[..., i] * p[..., j]``."""
    f = np.asarray(f, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = f[..., :, None] * p[..., None, :]
    return out.reshape(*out.shape[:-2], f.shape[-1] * p.shape[-1])


def _dropout_masks(disc: Discriminator, n: int, rng):
    if rng is None:
        raise ValueError("train_mode dropout needs a random generator")
    keep = 1.0 - disc.dropout
    return [
        (rng.random((n, layer.fan_out)) < keep) / keep for layer in disc.layers[:-1]
    ]


def _disc_forward(disc: Discriminator, v, masks):
    hs, zs = [v], []
    h = v
    for i, layer in enumerate(disc.layers):
        z = h @ layer.weight + layer.bias
        zs.append(z)
        if i < len(disc.layers) - 1:
            h = _act(z, layer.activation)
            if masks is not None:
                h = h * masks[i]
            hs.append(h)
    return hs, zs


def sigmoid(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_PROB_FLOOR = np.finfo(np.float64).eps / 2


def discriminate(disc: Discriminator, v, train_mode: bool = False, rng=None):
    """Probability that ``v`` came from the source side.

    Dropout is active only when ``train_mode`` is set and then consumes
    ``rng``. Output is clipped to stay strictly inside (0, 1).
    """
    single = np.ndim(v) == 1
    v = _as_batch(v, disc.input_dim)
    masks = _dropout_masks(disc, v.shape[0], rng) if train_mode and disc.dropout > 0 else None
    _, zs = _disc_forward(disc, v, masks)
    d = np.clip(sigmoid(zs[-1][:, 0]), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    return d[0] if single else d


def grl_backward(upstream, lam: float) -> np.ndarray:
    """Backward rule of the gradient reversal layer (its forward is identity)."""
    return -lam * np.asarray(upstream, dtype=np.float64)


# --------------------------------------------------------------------------
# backpropagation


@dataclass
class Batch:
    """Rows for one training step.

    ``labels[i] == -1`` excludes row ``i`` from the classification term;
    ``domain[i]`` is 1 for the source side, 0 for the target side and -1 to
    exclude the row from the domain term.
    """

    x: np.ndarray
    labels: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        n = self.x.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.domain = np.asarray(self.domain, dtype=np.int64).reshape(n)
        if n == 0:
            raise ValueError("empty batch")


@dataclass
class LossSpec:
    cls_weight: float = 1.0
    dom_weight: float = 1.0
    grl_lambda: float = 1.0
    train_mode: bool = False
    # False hands the extractor the plain domain gradient (no reversal, no lambda)
    reverse_gradient: bool = True


@dataclass
class Gradients:
    model: list[tuple[np.ndarray, np.ndarray]]
    disc: Optional[list[tuple[np.ndarray, np.ndarray]]]
    cls_loss: float = 0.0
    dom_loss: float = 0.0
    disc_correct: int = 0
    disc_total: int = 0
    extras: dict = field(default_factory=dict)


def _dense_backward(layers, hs, zs, g_out, grads):
    """Backprop ``g_out`` (gradient wrt the last layer's activation output)."""
    g = g_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        gz = _act_grad(zs[i], g, layer.activation)
        gw = hs[i].T @ gz
        gb = gz.sum(axis=0)
        grads[i] = (grads[i][0] + gw, grads[i][1] + gb)
        g = gz @ layer.weight.T
    return g


def backprop(
    model: AdaptationModel,
    disc: Optional[Discriminator],
    batch: Batch,
    loss_spec: LossSpec,
    rng: Optional[np.random.Generator] = None,
) -> Gradients:
    """Gradients of the classification and adversarial terms.

    Classification loss is the mean cross-entropy over rows with a label.
    Domain loss is the mean binary cross-entropy of the discriminator over
    rows with a domain tag. Discriminator parameters receive the gradient of
    ``dom_weight * domain_loss``; generator parameters receive
    ``cls_weight * d(cls)/d(theta)`` plus the domain gradient passed through
    :func:`grl_backward`.
    """
    x = _as_batch(batch.x, model.input_dim)
    n = x.shape[0]
    hs, zs = _extract(model, x)
    f = hs[-1]
    logits = f @ model.classifier.weight + model.classifier.bias
    logp = log_softmax(logits)
    p = np.exp(logp)

    model_grads = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]
    out = Gradients(model_grads, None)
    g_logits = np.zeros_like(logits)
    g_f = np.zeros_like(f)

    lab_rows = np.flatnonzero(batch.labels >= 0)
    if lab_rows.size:
        ll = logp[lab_rows, batch.labels[lab_rows]]
        out.cls_loss = float(-ll.mean())
        if not np.isfinite(out.cls_loss):
            raise NonFiniteLossError("classification", out.cls_loss)
        if loss_spec.cls_weight != 0.0:
            onehot = np.zeros((lab_rows.size, model.class_count))
            onehot[np.arange(lab_rows.size), batch.labels[lab_rows]] = 1.0
            g_logits[lab_rows] += loss_spec.cls_weight * (p[lab_rows] - onehot) / lab_rows.size

    dom_rows = np.flatnonzero(batch.domain >= 0)
    if disc is not None and dom_rows.size:
        fd, pd_ = f[dom_rows], p[dom_rows]
        v = outer_product(fd, pd_) if disc.condition == "product" else fd
        masks = None
        if loss_spec.train_mode and disc.dropout > 0:
            masks = _dropout_masks(disc, dom_rows.size, rng)
        dhs, dzs = _disc_forward(disc, v, masks)
        s = dzs[-1][:, 0]
        y = batch.domain[dom_rows].astype(np.float64)
        out.dom_loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
        if not np.isfinite(out.dom_loss):
            raise NonFiniteLossError("domain", out.dom_loss)
        out.disc_correct = int(np.sum((s > 0) == (y > 0.5)))
        out.disc_total = int(dom_rows.size)

        disc_grads = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in disc.layers]
        g_s = loss_spec.dom_weight * (sigmoid(s) - y)[:, None] / dom_rows.size
        # last layer is linear; hidden layers carry dropout masks
        last = disc.layers[-1]
        disc_grads[-1] = (dhs[-1].T @ g_s, g_s.sum(axis=0))
        g = g_s @ last.weight.T
        for i in range(len(disc.layers) - 2, -1, -1):
            layer = disc.layers[i]
            if masks is not None:
                g = g * masks[i]
            gz = _act_grad(dzs[i], g, layer.activation)
            disc_grads[i] = (dhs[i].T @ gz, gz.sum(axis=0))
            g = gz @ layer.weight.T
        out.disc = disc_grads

        g_v = grl_backward(g, loss_spec.grl_lambda) if loss_spec.reverse_gradient else g
        if disc.condition == "product":
            g_v = g_v.reshape(dom_rows.size, f.shape[1], model.class_count)
            g_f[dom_rows] += np.einsum("nij,nj->ni", g_v, pd_)
            g_p = np.einsum("nij,ni->nj", g_v, fd)
            g_logits[dom_rows] += pd_ * (g_p - np.sum(g_p * pd_, axis=1, keepdims=True))
        else:
            g_f[dom_rows] += g_v

    head = model.classifier
    model_grads[-1] = (f.T @ g_logits, g_logits.sum(axis=0))
    g_f = g_f + g_logits @ head.weight.T
    _dense_backward(model.extractor, hs, zs, g_f, model_grads)
    out.extras["n"] = n
    return out


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MJKDCKPT"
CHECKPOINT_VERSION = 1


def _layer_meta(layers):
    return [[l.fan_in, l.fan_out, l.activation, l.head] for l in layers]


def _flat(layers):
    parts = []
    for l in layers:
        parts.append(l.weight.ravel())
        parts.append(l.bias.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _unflat(meta, flat, offset):
    layers = []
    for fan_in, fan_out, act, head in meta:
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out].copy()
        offset += fan_out
        layers.append(Dense(w, b, act, bool(head)))
    return layers, offset


def save_checkpoint(path, model: AdaptationModel, disc: Optional[Discriminator] = None) -> None:
    """Versioned JSON header line followed by little-endian float64 parameters."""
    header = {
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "layer_widths": model.layer_widths,
        "feature_range": list(model.feature_range),
        "model_layers": _layer_meta(model.layers),
        "disc_layers": _layer_meta(disc.layers) if disc is not None else None,
        "disc_dropout": disc.dropout if disc is not None else None,
        "disc_condition": disc.condition if disc is not None else None,
    }
    flat = _flat(model.layers)
    if disc is not None:
        flat = np.concatenate([flat, _flat(disc.layers)])
    header["param_count"] = int(flat.size)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[AdaptationModel, Optional[Discriminator]]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    header = json.loads(raw[pos : pos + hlen])
    pos += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    flat = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64)
    if flat.size != header["param_count"]:
        raise ValueError(f"{path}: expected {header['param_count']} parameters, found {flat.size}")
    layers, off = _unflat(header["model_layers"], flat, 0)
    model = AdaptationModel(layers[:-1], layers[-1], tuple(header["feature_range"]), header["seed"])
    disc = None
    if header["disc_layers"] is not None:
        dlayers, off = _unflat(header["disc_layers"], flat, off)
        disc = Discriminator(dlayers, header["disc_dropout"], header["disc_condition"])
    return model, disc
