"""Small dense-network kernel: affine layers, activations, softmax
cross-entropy, Adam and a step learning-rate schedule.

Everything runs in float64. Models plug into :func:`train_loop` by exposing
``params()`` (list of arrays, updated in place) and
``loss_and_grads(x, y) -> (loss, grads)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from shoulderx._io import atomic_write_text
from shoulderx.data import DataError, FeatureTable

log = logging.getLogger(__name__)


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        """Fan-in uniform init: U(-1/sqrt(in_dim), 1/sqrt(in_dim)) for weights and bias."""
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError("layer dims must be positive")
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(w, b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


def linear_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """y = W x + b for a single vector or a (batch, in_dim) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"expected input of length {layer.in_dim}, got {x.shape[-1]}")
    return x @ layer.weights.T + layer.bias


def linear_backward(layer: DenseLayer, x: np.ndarray, dy: np.ndarray):
    """Gradients of a batched affine map: (dW, db, dx)."""
    return dy.T @ x, dy.sum(axis=0), dy @ layer.weights


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    Single sample: ``logits`` shape (K,), ``label`` int; returns
    ``(loss, grad)``. Batched: ``logits`` (n, K), ``label`` (n,); the loss is
    the batch mean and ``grad`` is already divided by n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        loss, grad = cross_entropy(logits[None, :], np.array([label]))
        return loss, grad[0]
    labels = np.asarray(label, dtype=np.int64)
    n = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -lsm[np.arange(n), labels].mean()
    grad = np.exp(lsm)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> Sequence[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 40
    decay_every: int = 10
    decay_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


class Trainable(Protocol):
    def params(self) -> list[np.ndarray]: ...

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]: ...


def seed_streams(seed: int, n: int = 2) -> list[np.random.Generator]:
    """Independent generators derived from one seed (init, shuffling, ...)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class TrainResult:
    model: object
    history: list[float] = field(default_factory=list)


def train_loop(model: Trainable, data: FeatureTable, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on mean softmax cross-entropy.

    Samples are reshuffled every epoch with a generator seeded from
    ``cfg.seed``; the run is fully determined by (model init, data, cfg).
    ``history`` holds the sample-weighted mean loss of each epoch.
    """
    if len(data) == 0:
        raise DataError("cannot train on an empty table")
    x, y = data.features, data.labels
    n = len(data)
    _, shuffle_rng = seed_streams(cfg.seed)
    params = model.params()
    state = AdamState.zeros_like(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x[idx], y[idx])
            adam_step(params, grads, state, lr)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("epoch %d lr %.1e loss %.6f", epoch, lr, history[-1])
    return TrainResult(model, history)


# -- model files -----------------------------------------------------------
#
#   shoulderx-model v1
#   kind <name>
#   meta <key>=<value> ...
#   layers <count>
#   layer <out_dim> <in_dim>
#   <out_dim lines of in_dim weights>
#   <one line of out_dim biases>
#   ...
# Reals are written with 17 significant digits (exact float64 round-trip).

MODEL_FILE_MAGIC = "shoulderx-model v1"


def _fmt_row(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def format_model_file(kind: str, meta: dict, layers: Sequence[DenseLayer]) -> str:
    lines = [MODEL_FILE_MAGIC, f"kind {kind}",
             "meta " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())),
             f"layers {len(layers)}"]
    for layer in layers:
        lines.append(f"layer {layer.out_dim} {layer.in_dim}")
        lines.extend(_fmt_row(row) for row in layer.weights)
        lines.append(_fmt_row(layer.bias))
    return "\n".join(lines) + "\n"


def write_model_file(path, kind: str, meta: dict, layers: Sequence[DenseLayer]) -> None:
    atomic_write_text(path, format_model_file(kind, meta, layers))


def read_model_file(path) -> tuple[str, dict, list[DenseLayer]]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    lines = p.read_text(encoding="utf-8").splitlines()
    it = iter(lines)

    def expect(prefix: str) -> str:
        try:
            line = next(it)
        except StopIteration:
            raise DataError(f"{p}: truncated model file") from None
        if not line.startswith(prefix):
            raise DataError(f"{p}: expected {prefix.strip()!r}, got {line[:40]!r}")
        return line[len(prefix):]

    if next(it, None) != MODEL_FILE_MAGIC:
        raise DataError(f"{p}: not a {MODEL_FILE_MAGIC} file")
    kind = expect("kind ").strip()
    meta = dict(tok.split("=", 1) for tok in expect("meta").split())
    count = int(expect("layers "))
    layers = []
    for _ in range(count):
        out_dim, in_dim = map(int, expect("layer ").split())
        try:
            w = np.array([[float(t) for t in next(it).split()] for _ in range(out_dim)])
            b = np.array([float(t) for t in next(it).split()])
        except (StopIteration, ValueError) as e:
            raise DataError(f"{p}: malformed layer data ({e})") from None
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
            raise DataError(f"{p}: layer data does not match declared shape {out_dim}x{in_dim}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DataError(f"{p}: non-finite parameter")
        layers.append(DenseLayer(w, b))
    return kind, meta, layers
