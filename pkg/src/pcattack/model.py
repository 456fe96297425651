"""A small PointNet-style classifier in plain numpy.

Every point goes through the same stack of dense layers, the per-point
features are max-pooled coordinate-wise, and a second stack maps the pooled
vector to class logits. The backward pass is written out by hand so that
both the input gradient (used by the attacks and the saliency defense) and
the parameter gradients (used by training) are exact.

At max-pool ties the gradient is routed to the lowest-index point.
"""

import io
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu")

WEIGHTS_MAGIC = b"PCNW"
WEIGHTS_VERSION = 1


class ModelConfigError(ValueError):
    """Inconsistent layer dimensions or an invalid label."""


class WeightFormatError(ValueError):
    """Malformed, truncated or unsupported weight file."""


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ModelConfigError(
                f"layer dims inconsistent: W {self.weights.shape}, b {self.biases.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ModelConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


@dataclass
class PointClassifier:
    per_point: list
    head: list
    num_classes: int = field(default=None)

    def __post_init__(self):
        if self.num_classes is None:
            self.num_classes = self.head[-1].out_dim
        self.validate()

    def validate(self):
        if not self.per_point or not self.head:
            raise ModelConfigError("both layer stacks must be non-empty")
        if self.per_point[0].in_dim != 3:
            raise ModelConfigError("first per-point layer must take 3 inputs")
        layers = self.layers
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ModelConfigError(
                    f"dimension mismatch: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.head[-1].out_dim != self.num_classes:
            raise ModelConfigError("head output does not match num_classes")
        for layer in layers:
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
                raise ModelConfigError("non-finite parameters")

    @property
    def layers(self):
        return list(self.per_point) + list(self.head)

    def copy(self):
        clone = lambda ls: [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in ls]
        return PointClassifier(clone(self.per_point), clone(self.head), self.num_classes)


def init_model(num_classes, per_point_dims=(32, 64, 128), head_dims=(64,), seed=0):
    """He-initialized classifier: 3 -> per_point_dims -> max-pool -> head_dims -> C."""
    rng = np.random.default_rng(seed)

    def stack(dims, last_identity):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            act = "identity" if last_identity and i == len(dims) - 2 else "relu"
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return layers

    per_point = stack((3, *per_point_dims), last_identity=False)
    head = stack((per_point_dims[-1], *head_dims, num_classes), last_identity=True)
    return PointClassifier(per_point, head, num_classes)


def _dense(x, layer):
    shape = x.shape
    if x.ndim == 2:
        # head rows: an explicit reduction so each row's logits do not depend
        # on how many clouds share the batch (BLAS switches kernels at B=1)
        z = (x[:, None, :] * layer.weights[None]).sum(axis=-1) + layer.biases
    else:
        # one 2D GEMM over all points is far faster than a batched matmul
        z = x.reshape(-1, shape[-1]) @ layer.weights.T + layer.biases
        z = z.reshape(*shape[:-1], layer.out_dim)
    return np.maximum(z, 0.0) if layer.activation == "relu" else z


def _matmul(g, w):
    shape = g.shape
    return (g.reshape(-1, shape[-1]) @ w).reshape(*shape[:-1], w.shape[-1])


def _forward_cache(model, x):
    """Forward pass over a ``(B, N, 3)`` batch, keeping what backprop needs."""
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ModelConfigError(f"expected (B, N, 3) input, got {x.shape}")
    acts = [x]
    for layer in model.per_point:
        acts.append(_dense(acts[-1], layer))
    feats = acts[-1]
    arg = feats.argmax(axis=1)  # (B, F), first occurrence on ties
    pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
    head_acts = [pooled]
    for layer in model.head:
        head_acts.append(_dense(head_acts[-1], layer))
    return acts, arg, head_acts


def _backward(model, cache, dlogits, want_params=False):
    """Backpropagate ``dlogits`` (B, C). Returns (dX, param_grads)."""
    acts, arg, head_acts = cache
    grads = []
    g = dlogits
    for layer, a_in, a_out in zip(
        reversed(model.head), reversed(head_acts[:-1]), reversed(head_acts[1:])
    ):
        if layer.activation == "relu":
            g = g * (a_out > 0)
        if want_params:
            grads.append((g.T @ a_in, g.sum(axis=0)))
        g = g @ layer.weights
    B, N, F = acts[-1].shape
    g_feats = np.zeros((B, N, F))
    np.put_along_axis(g_feats, arg[:, None, :], g[:, None, :], axis=1)
    g = _backward_points(model, acts, g_feats, grads if want_params else None)
    # collected head-last-first; reversed this matches model.layers order
    grads.reverse()
    return g, grads if want_params else None


def _backward_points(model, acts, g, grads=None):
    """Backpropagate per-point feature gradients to the coordinates."""
    for layer, a_in, a_out in zip(
        reversed(model.per_point), reversed(acts[:-1]), reversed(acts[1:])
    ):
        if layer.activation == "relu":
            g = g * (a_out > 0)
        if grads is not None:
            grads.append(
                (
                    g.reshape(-1, g.shape[-1]).T @ a_in.reshape(-1, a_in.shape[-1]),
                    g.sum(axis=tuple(range(g.ndim - 1))),
                )
            )
        g = _matmul(g, layer.weights)
    return g


def _points(cloud):
    pts = getattr(cloud, "points", cloud)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ModelConfigError(f"expected a non-empty (N, 3) cloud, got {pts.shape}")
    return pts


def forward_batch(model, clouds):
    """Logits ``(B, C)`` for a ``(B, N, 3)`` batch of equal-size clouds."""
    return _forward_cache(model, np.asarray(clouds, dtype=np.float64))[2][-1]


def forward(model, cloud):
    """Class logits for a single cloud."""
    return forward_batch(model, _points(cloud)[None])[0]


def predict(model, cloud):
    return int(forward(model, cloud).argmax())


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(model, labels):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise ModelConfigError(f"label out of range [0, {model.num_classes})")
    return labels.astype(np.int64)


def objective(model, cloud, label):
    """Cross-entropy of the true label; the quantity the attack maximizes."""
    label = int(_check_labels(model, [label])[0])
    return float(-_log_softmax(forward(model, cloud))[label])


def objective_and_gradient_batch(model, clouds, labels):
    """Per-cloud cross-entropy, logits and input gradient for a batch.

    Returns ``(losses (B,), logits (B, C), grads (B, N, 3))``.
    """
    labels = _check_labels(model, labels)
    cache = _forward_cache(model, np.asarray(clouds, dtype=np.float64))
    logits = cache[2][-1]
    logp = _log_softmax(logits)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dx, _ = _backward(model, cache, dlogits)
    return losses, logits, dx


def _head(model, pooled, labels):
    """Head forward + backward: losses, logits and d loss / d pooled."""
    acts = [pooled]
    for layer in model.head:
        acts.append(_dense(acts[-1], layer))
    logp = _log_softmax(acts[-1])
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    for layer, a_out in zip(reversed(model.head), reversed(acts[1:])):
        if layer.activation == "relu":
            g = g * (a_out > 0)
        g = g @ layer.weights
    return losses, acts[-1], g


def pooled_features(model, clouds):
    """Max-pooled per-point features ``(B, F)`` of a ``(B, N, 3)`` batch."""
    x = np.asarray(clouds, dtype=np.float64)
    for layer in model.per_point:
        x = _dense(x, layer)
    return x.max(axis=1)


def added_points_objective_and_gradient(model, base_pooled, added, labels):
    """Objective of ``base ∪ added`` and its gradient w.r.t. the added points.

    ``base_pooled`` is :func:`pooled_features` of the base clouds, which
    stays fixed while only the added points move. Base points precede the
    added ones, so on a pooling tie the base point keeps the credit.
    Returns ``(losses (B,), logits (B, C), grads (B, n, 3))``.
    """
    labels = _check_labels(model, labels)
    acts = [np.asarray(added, dtype=np.float64)]
    for layer in model.per_point:
        acts.append(_dense(acts[-1], layer))
    feats = acts[-1]
    arg = feats.argmax(axis=1)
    added_max = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
    wins = added_max > base_pooled
    pooled = np.where(wins, added_max, base_pooled)
    losses, logits, dpooled = _head(model, pooled, labels)
    g_feats = np.zeros_like(feats)
    np.put_along_axis(g_feats, arg[:, None, :], (dpooled * wins)[:, None, :], axis=1)
    return losses, logits, _backward_points(model, acts, g_feats)


def input_gradient(model, cloud, label):
    """d objective / d point coordinates, shape ``(N, 3)``."""
    pts = _points(cloud)
    _, _, g = objective_and_gradient_batch(model, pts[None], [label])
    return g[0]


def gradient_norms(model, cloud, label):
    return np.sqrt((input_gradient(model, cloud, label) ** 2).sum(axis=1))


# --- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 15
    seed: int = 0
    # PointNet-style augmentation: random point dropout, scaling and jitter
    augment: bool = True
    max_dropout: float = 0.875
    scale_range: tuple = (0.8, 1.25)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05


def augment_batch(clouds, config, rng):
    """Randomly drop points (overwriting them with the first point, which
    leaves the max-pool unchanged), rescale each cloud and add clipped noise."""
    out = clouds.copy()
    B, N, _ = out.shape
    for b in range(B):
        ratio = rng.random() * config.max_dropout
        drop = np.flatnonzero(rng.random(N) <= ratio)
        if len(drop):
            out[b, drop] = out[b, 0]
    out *= rng.uniform(*config.scale_range, size=(B, 1, 1))
    noise = np.clip(config.jitter_sigma * rng.normal(size=out.shape),
                    -config.jitter_clip, config.jitter_clip)
    return out + noise


def accuracy(model, clouds, labels, batch_size=256):
    clouds = np.asarray(clouds, dtype=np.float64)
    preds = np.concatenate(
        [forward_batch(model, clouds[i : i + batch_size]).argmax(axis=1)
         for i in range(0, len(clouds), batch_size)]
    ) if len(clouds) else np.zeros(0, dtype=int)
    return float(np.mean(preds == np.asarray(labels))) if len(clouds) else 0.0


def train(model, clouds, labels, config=None, log_every=5):
    """Minibatch SGD with momentum on mean cross-entropy.

    ``clouds`` is ``(S, N, 3)``. Returns a new model; the input is not
    modified. Shuffling is driven by ``config.seed`` only.
    """
    config = config or TrainConfig()
    clouds = np.asarray(clouds, dtype=np.float64)
    labels = _check_labels(model, labels)
    if len(clouds) == 0:
        raise ValueError("empty dataset")
    if len(clouds) != len(labels):
        raise ValueError("clouds and labels differ in length")
    model = model.copy()
    layers = model.layers
    velocity = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in layers]
    rng = np.random.default_rng(config.seed)
    lr = config.lr
    for epoch in range(config.epochs):
        if epoch and config.decay_every and epoch % config.decay_every == 0:
            lr *= config.lr_decay
        order = rng.permutation(len(clouds))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            inputs = augment_batch(clouds[batch], config, rng) if config.augment else clouds[batch]
            cache = _forward_cache(model, inputs)
            logp = _log_softmax(cache[2][-1])
            rows = np.arange(len(batch))
            loss = -logp[rows, labels[batch]].mean()
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}")
            total += loss * len(batch)
            dlogits = np.exp(logp)
            dlogits[rows, labels[batch]] -= 1.0
            dlogits /= len(batch)
            _, grads = _backward(model, cache, dlogits, want_params=True)
            for layer, (gw, gb), (vw, vb) in zip(layers, grads, velocity):
                vw *= config.momentum
                vw -= lr * gw
                vb *= config.momentum
                vb -= lr * gb
                layer.weights += vw
                layer.biases += vb
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d  loss %.4f", epoch + 1, total / len(clouds))
    return model


# --- serialization ----------------------------------------------------------
#
# Little-endian binary layout:
#   4s   magic "PCNW"
#   u32  format version (1)
#   u32  num_classes
#   u32  number of per-point layers
#   u32  number of head layers
#   per layer:  u32 out_dim, u32 in_dim, u8 activation (0 identity, 1 relu)
#   per layer, same order:  f64[out*in] weights row-major, f64[out] biases


def dumps_weights(model):
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<IIII", WEIGHTS_VERSION, model.num_classes,
                          len(model.per_point), len(model.head)))
    for layer in model.layers:
        buf.write(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                              ACTIVATIONS.index(layer.activation)))
    for layer in model.layers:
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_weights(data):
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFormatError("weight file is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != WEIGHTS_MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    version, num_classes, n_pp, n_head = struct.unpack("<IIII", take(16))
    if version != WEIGHTS_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    if n_pp == 0 or n_head == 0 or n_pp + n_head > 64:
        raise WeightFormatError("implausible layer count")
    dims = []
    for _ in range(n_pp + n_head):
        out_dim, in_dim, act = struct.unpack("<IIB", take(9))
        if act >= len(ACTIVATIONS):
            raise WeightFormatError(f"unknown activation tag {act}")
        dims.append((out_dim, in_dim, ACTIVATIONS[act]))
    layers = []
    for out_dim, in_dim, act in dims:
        w = np.frombuffer(take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(take(8 * out_dim), dtype="<f8")
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), act))
    if pos != len(data):
        raise WeightFormatError("trailing bytes after parameter blocks")
    try:
        return PointClassifier(layers[:n_pp], layers[n_pp:], num_classes)
    except ModelConfigError as exc:
        raise WeightFormatError(str(exc)) from exc


def save_weights(model, path):
    """Write atomically: the target is either complete or absent."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_weights(model))
    os.replace(tmp, path)


def load_weights(path):
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
