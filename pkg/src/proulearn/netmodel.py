"""Small feedforward classifier with hand-written gradients.

Layout: ``tanh`` backbone layer(s) -> linear bottleneck (the embedding
space ``f(x)``) -> linear classifier (logits). Three adaptation losses are
provided together with their exact gradients:

* weighted cross-entropy over hard (active or pseudo) labels,
* information maximisation: ``sum_c mu_c log mu_c + mean_i H(p_i)``,
* central correlation: ``mean_i (1 - corr(f(x_i), o_{y_i}))``.

Centroids and sample weights are constants to the backward pass.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from proulearn.correlation import EPS_DENOM
from proulearn.data_io import FormatError, RandomSource, as_feature_matrix, as_label_vector, softmax

logger = logging.getLogger(__name__)

EPS_LOG = 1e-8
MODEL_MAGIC = b"PULM"
MODEL_VERSION = 1
ACTIVATIONS = {"tanh": 1}
BACKBONE, BOTTLENECK, CLASSIFIER = "backbone", "bottleneck", "classifier"


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    group: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class NetModel:
    layers: list[Layer]
    activation: str = "tanh"

    @property
    def d_in(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-2].W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].W.shape[1]

    def copy(self) -> NetModel:
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out


def init_model(d_in: int, num_classes: int, hidden=(32,), embed_dim: int = 16, seed: int = 0) -> NetModel:
    """Glorot-uniform weights, zero biases."""
    if embed_dim < 2:
        raise ValueError("embedding dimension must be >= 2")
    if isinstance(hidden, int):
        hidden = (hidden,)
    gen = RandomSource(seed, 0).generator()
    dims = [d_in, *hidden, embed_dim, num_classes]
    groups = [BACKBONE] * len(hidden) + [BOTTLENECK, CLASSIFIER]
    layers = []
    for (fan_in, fan_out), group in zip(zip(dims[:-1], dims[1:]), groups):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(gen.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out), group))
    return NetModel(layers)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _forward_cache(model: NetModel, X: np.ndarray) -> list[np.ndarray]:
    acts = [X]
    a = X
    for layer in model.layers:
        z = a @ layer.W + layer.b
        a = np.tanh(z) if layer.group == BACKBONE else z
        acts.append(a)
    return acts


def forward(model: NetModel, x_batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(embeddings, logits)`` for a batch."""
    X = np.asarray(x_batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ValueError(f"model expects {model.d_in} input features, got shape {X.shape}")
    acts = _forward_cache(model, X)
    return acts[-2], acts[-1]


def predict_proba(model: NetModel, X) -> np.ndarray:
    return softmax(forward(model, X)[1])


# ---------------------------------------------------------------------------
# losses and their gradients w.r.t. logits / embeddings
# ---------------------------------------------------------------------------


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def _wce_parts(logits, labels, weights):
    p = softmax(logits)
    n = p.shape[0]
    rows = np.arange(n)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (n,))
    py = p[rows, labels]
    loss = float(np.mean(-w * np.log(py + EPS_LOG)))
    dp = np.zeros_like(p)
    dp[rows, labels] = -w / (py + EPS_LOG) / n
    return loss, _softmax_backward(p, dp)


def loss_wce(logits, labels, weights) -> float:
    """Mean of ``-w_i log p_{y_i}`` with a guarded logarithm."""
    return _wce_parts(logits, np.asarray(labels), weights)[0]


def _smoothed_ce_parts(logits, labels, alpha):
    p = softmax(logits)
    n, M = p.shape
    t = np.full_like(p, alpha / M)
    t[np.arange(n), labels] += 1.0 - alpha
    loss = float(np.mean(-(t * np.log(p + EPS_LOG)).sum(axis=1)))
    dp = -t / (p + EPS_LOG) / n
    return loss, _softmax_backward(p, dp)


def loss_smoothed_ce(logits, labels, alpha: float = 0.1) -> float:
    """Cross-entropy against ``(1 - alpha) * onehot + alpha / M`` targets."""
    return _smoothed_ce_parts(logits, np.asarray(labels), alpha)[0]


def _im_parts(logits):
    p = softmax(logits)
    n = p.shape[0]
    mu = p.mean(axis=0)
    diversity = float(np.sum(mu * np.log(mu + EPS_LOG)))
    sharp = float(np.mean(-(p * np.log(p + EPS_LOG)).sum(axis=1)))
    dmu = np.log(mu + EPS_LOG) + mu / (mu + EPS_LOG)
    dp_ent = -(np.log(p + EPS_LOG) + p / (p + EPS_LOG))
    dp = (dmu[None, :] + dp_ent) / n
    return diversity + sharp, _softmax_backward(p, dp)


def loss_im(logits) -> float:
    """Information maximisation: negative batch-mean entropy plus mean entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 1:
        raise ValueError("empty batch")
    return _im_parts(logits)[0]


def _cc_parts(emb, centroids):
    E = np.asarray(emb, dtype=np.float64)
    O = np.asarray(centroids, dtype=np.float64)
    n = E.shape[0]
    a = E - E.mean(axis=1, keepdims=True)
    b = O - O.mean(axis=1, keepdims=True)
    na = np.sqrt((a * a).sum(1))
    nb = np.sqrt((b * b).sum(1))
    den = na * nb
    guarded = den < EPS_DENOM
    c_raw = (a * b).sum(1) / np.maximum(den, EPS_DENOM)
    c = np.clip(c_raw, -1.0, 1.0)
    loss = float(np.mean(1.0 - c))
    # d corr / d a; already mean-free since a and b are, so no centring term
    safe_den = np.where(guarded, 1.0, den)
    safe_na2 = np.where(guarded, 1.0, na * na)
    dcda = b / safe_den[:, None] - c_raw[:, None] * a / safe_na2[:, None]
    dcda[guarded] = 0.0
    return loss, -dcda / n


def loss_cc(embeddings, assigned_centroids) -> float:
    """Mean of ``1 - corr(f_i, o_i)``; lies in ``[0, 2]``."""
    return _cc_parts(embeddings, assigned_centroids)[0]


def total_loss(l_wce: float, l_im: float, l_cc: float) -> float:
    return l_wce + l_im + l_cc


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    wce: float = 0.0
    im: float = 0.0
    cc: float = 0.0

    @property
    def total(self) -> float:
        return total_loss(self.wce, self.im, self.cc)


Gradients = list[tuple[np.ndarray, np.ndarray]]


def _backprop(model: NetModel, acts: list[np.ndarray], d_logits: np.ndarray, d_emb: np.ndarray | None) -> Gradients:
    grads: Gradients = [None] * len(model.layers)  # type: ignore[list-item]
    delta = d_logits
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        a_in = acts[li]
        grads[li] = (a_in.T @ delta, delta.sum(axis=0))
        if li == 0:
            break
        delta = delta @ layer.W.T
        if li == len(model.layers) - 1 and d_emb is not None:
            delta = delta + d_emb
        if model.layers[li - 1].group == BACKBONE:
            delta = delta * (1.0 - acts[li] ** 2)
    return grads


def loss_and_grad(
    model: NetModel,
    x_batch,
    labels,
    weights,
    assigned_centroids=None,
    terms: tuple[str, ...] = ("wce", "im", "cc"),
) -> tuple[LossBreakdown, Gradients]:
    """Loss components and exact parameter gradients of their sum.

    Terms not listed in ``terms`` contribute neither loss nor gradient.
    """
    X = np.asarray(x_batch, dtype=np.float64)
    acts = _forward_cache(model, X)
    emb, logits = acts[-2], acts[-1]
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits")
    d_logits = np.zeros_like(logits)
    d_emb = None
    parts = {}
    labels = np.asarray(labels)
    if "wce" in terms:
        parts["wce"], g = _wce_parts(logits, labels, weights)
        d_logits += g
    if "im" in terms:
        parts["im"], g = _im_parts(logits)
        d_logits += g
    if "cc" in terms:
        if assigned_centroids is None:
            raise ValueError("central correlation term needs assigned centroids")
        parts["cc"], d_emb = _cc_parts(emb, assigned_centroids)
    return LossBreakdown(**parts), _backprop(model, acts, d_logits, d_emb)


def backward(model: NetModel, x_batch, labels, weights, assigned_centroids, terms=("wce", "im", "cc")) -> Gradients:
    return loss_and_grad(model, x_batch, labels, weights, assigned_centroids, terms)[1]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """SGD with classic momentum (``v = m v + g; p -= lr v``) per group.

    The bottleneck group always runs at ten times the backbone rate.
    """

    lr_backbone: float = 1e-2
    lr_classifier: float | None = None
    momentum: float = 0.9
    buffers: list | None = field(default=None, repr=False)

    @property
    def lr_bottleneck(self) -> float:
        return 10.0 * self.lr_backbone

    def lr_for(self, group: str) -> float:
        if group == BOTTLENECK:
            return self.lr_bottleneck
        if group == CLASSIFIER:
            return self.lr_backbone if self.lr_classifier is None else self.lr_classifier
        return self.lr_backbone


def sgd_step(model: NetModel, grads: Gradients, opt: OptimState) -> None:
    for gW, gb in grads:
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise DivergenceError("non-finite gradient")
    if opt.buffers is None:
        opt.buffers = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in model.layers]
    for layer, (gW, gb), (vW, vb) in zip(model.layers, grads, opt.buffers):
        if gW.shape != layer.W.shape or gb.shape != layer.b.shape:
            raise ValueError("gradient shape does not match parameter shape")
        vW *= opt.momentum
        vW += gW
        vb *= opt.momentum
        vb += gb
        lr = opt.lr_for(layer.group)
        layer.W -= lr * vW
        layer.b -= lr * vb


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.9
    label_smoothing: float = 0.1
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    seed: int = 0


SHUFFLE_STREAM = 1 << 40


def pretrain_source(features, labels, num_classes: int | None = None, config: PretrainConfig | None = None) -> NetModel:
    """Supervised source training with label-smoothed cross-entropy."""
    cfg = config or PretrainConfig()
    X = as_feature_matrix(features, min_cols=1)
    y = np.asarray(labels, dtype=np.int64)
    M = int(num_classes if num_classes is not None else y.max() + 1)
    y = as_label_vector(y, M, X.shape[0])
    model = init_model(X.shape[1], M, hidden=cfg.hidden, embed_dim=cfg.embed_dim, seed=cfg.seed)
    opt = OptimState(lr_backbone=cfg.lr, momentum=cfg.momentum)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = RandomSource(cfg.seed, SHUFFLE_STREAM + epoch).generator().permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            acts = _forward_cache(model, X[idx])
            if not np.all(np.isfinite(acts[-1])):
                raise DivergenceError(f"non-finite logits at epoch {epoch}")
            loss, d_logits = _smoothed_ce_parts(acts[-1], y[idx], cfg.label_smoothing)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite source loss at epoch {epoch}")
            sgd_step(model, _backprop(model, acts, d_logits, None), opt)
    logger.info("source pretraining done: %d epochs on %d samples", cfg.epochs, n)
    return model


def accuracy(model: NetModel, features, labels) -> float:
    logits = forward(model, features)[1]
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<4sII")
_LAYER_HEADER = struct.Struct("<II")
_MODEL_TRAILER = struct.Struct("<IIIB")


def save_model(model: NetModel, path) -> None:
    """Write a checkpoint; parameters are stored as float32."""
    with open(Path(path), "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(model.layers)))
        for layer in model.layers:
            rows, cols = layer.W.shape
            fh.write(_LAYER_HEADER.pack(rows, cols))
            fh.write(np.ascontiguousarray(layer.W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
        fh.write(_MODEL_TRAILER.pack(model.d_in, model.embed_dim, model.num_classes, ACTIVATIONS[model.activation]))


def load_model(path) -> NetModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_layers = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n_layers < 2:
        raise FormatError(f"{path}: need at least bottleneck and classifier layers")
    off = _MODEL_HEADER.size
    layers = []
    for li in range(n_layers):
        if off + _LAYER_HEADER.size > len(data):
            raise FormatError(f"{path}: truncated layer {li}")
        rows, cols = _LAYER_HEADER.unpack_from(data, off)
        off += _LAYER_HEADER.size
        nbytes = 4 * (rows * cols + cols)
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated layer {li}")
        W = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += 4 * rows * cols
        b = np.frombuffer(data, dtype="<f4", count=cols, offset=off).astype(np.float64)
        off += 4 * cols
        group = CLASSIFIER if li == n_layers - 1 else BOTTLENECK if li == n_layers - 2 else BACKBONE
        layers.append(Layer(W, b, group))
    if len(data) - off != _MODEL_TRAILER.size:
        raise FormatError(f"{path}: bad trailer")
    d_in, D, M, act = _MODEL_TRAILER.unpack_from(data, off)
    activation = {v: k for k, v in ACTIVATIONS.items()}.get(act)
    if activation is None:
        raise FormatError(f"{path}: unknown activation tag {act}")
    model = NetModel(layers, activation)
    if (model.d_in, model.embed_dim, model.num_classes) != (d_in, D, M):
        raise FormatError(f"{path}: trailer dimensions disagree with layer shapes")
    return model
