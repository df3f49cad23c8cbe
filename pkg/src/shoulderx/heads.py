"""Classification heads on frozen backbone features.

Two topologies:

* standard FC - one dense layer, features -> 2 logits;
* spinal FC - four narrow segments of width ``w`` fed gradually.  With
  ``x_a``/``x_b`` the first/second half of the feature vector::

      s1 = relu(L1(x_a))
      s2 = relu(L2([x_b, s1]))
      s3 = relu(L3([x_a, s2]))
      s4 = relu(L4([x_b, s3]))
      logits = C([s1, s2, s3, s4])

  so the penultimate vector has length ``4 * w``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from shoulderx.data import DataError, FeatureTable, PredictionTable
from shoulderx.nn import (
    DenseLayer,
    TrainConfig,
    TrainResult,
    cross_entropy,
    linear_backward,
    linear_forward,
    read_model_file,
    relu,
    seed_streams,
    sigmoid,
    softmax,
    train_loop,
    write_model_file,
)

# Spinal FC layer widths per backbone.
SPINAL_WIDTHS = {
    "ResNet34": 256, "ResNet50": 128, "ResNet101": 1024, "ResNet152": 1024,
    "ResNeXt50": 20, "ResNeXt101": 128, "DenseNet169": 240, "DenseNet201": 240,
    "VGG13": 256, "VGG16": 512, "VGG19": 512, "MobileNetV2": 320, "InceptionV3": 20,
}

ScoreFn = Literal["softmax", "sigmoid"]


def _scores(logits: np.ndarray, score_fn: str) -> np.ndarray:
    if score_fn == "softmax":
        return softmax(logits)
    if score_fn == "sigmoid":
        return sigmoid(logits)
    raise ValueError(f"unknown score function {score_fn!r}")


def _check_dim(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"expected feature length {dim}, got {x.shape[-1]}")
    return x


class LinearHead:
    """A single dense layer to 2 logits; also the basis of the ensemble heads."""

    kind = "linear"

    def __init__(self, classifier: DenseLayer, score_fn: ScoreFn = "softmax"):
        if classifier.out_dim != 2:
            raise ValueError("classifier must have 2 outputs")
        self.classifier = classifier
        self.score_fn = score_fn

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator, **kw):
        return cls(DenseLayer.init(feature_dim, 2, rng), **kw)

    @property
    def feature_dim(self) -> int:
        return self.classifier.in_dim

    def params(self) -> list[np.ndarray]:
        return self.classifier.params()

    def layers(self) -> list[DenseLayer]:
        return [self.classifier]

    def penultimate(self, x) -> np.ndarray:
        return _check_dim(x, self.feature_dim)

    def logits(self, x) -> np.ndarray:
        return linear_forward(self.classifier, _check_dim(x, self.feature_dim))

    def scores(self, x) -> np.ndarray:
        return _scores(self.logits(x), self.score_fn)

    def loss_and_grads(self, x, y):
        x = np.atleast_2d(_check_dim(x, self.feature_dim))
        loss, dlogits = cross_entropy(linear_forward(self.classifier, x), np.atleast_1d(y))
        dw, db, _ = linear_backward(self.classifier, x, dlogits)
        return loss, [dw, db]


class StandardFCHead(LinearHead):
    kind = "standard"


class SpinalFCHead:
    kind = "spinal"
    score_fn = "softmax"

    def __init__(self, segments: list[DenseLayer], classifier: DenseLayer):
        if len(segments) != 4:
            raise ValueError("spinal head needs exactly 4 segments")
        w = segments[0].out_dim
        half = segments[0].in_dim
        for k, seg in enumerate(segments):
            want = half if k == 0 else half + w
            if seg.in_dim != want or seg.out_dim != w:
                raise ValueError(f"segment {k + 1} must map {want} -> {w}, got {seg.in_dim} -> {seg.out_dim}")
        if classifier.in_dim != 4 * w or classifier.out_dim != 2:
            raise ValueError(f"classifier must map {4 * w} -> 2")
        self.segments = segments
        self.classifier = classifier

    @classmethod
    def init(cls, feature_dim: int, width: int, rng: np.random.Generator) -> "SpinalFCHead":
        if feature_dim <= 0 or feature_dim % 2:
            raise ValueError(f"spinal head needs an even feature dim, got {feature_dim}")
        if width <= 0:
            raise ValueError("layer width must be positive")
        half = feature_dim // 2
        segs = [DenseLayer.init(half if k == 0 else half + width, width, rng) for k in range(4)]
        return cls(segs, DenseLayer.init(4 * width, 2, rng))

    @property
    def width(self) -> int:
        return self.segments[0].out_dim

    @property
    def feature_dim(self) -> int:
        return 2 * self.segments[0].in_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in layer.params()]

    def layers(self) -> list[DenseLayer]:
        return [*self.segments, self.classifier]

    def _forward(self, x):
        x = np.atleast_2d(_check_dim(x, self.feature_dim))
        half = self.feature_dim // 2
        halves = (x[:, :half], x[:, half:])
        inputs, pre, outs = [], [], []
        prev = None
        for k, seg in enumerate(self.segments):
            part = halves[k % 2]
            inp = part if prev is None else np.concatenate([part, prev], axis=1)
            z = linear_forward(seg, inp)
            prev = relu(z)
            inputs.append(inp)
            pre.append(z)
            outs.append(prev)
        penult = np.concatenate(outs, axis=1)
        return penult, linear_forward(self.classifier, penult), (inputs, pre)

    def forward(self, x):
        """(penultimate, logits); a 1-D input gives 1-D outputs."""
        penult, logits, _ = self._forward(x)
        if np.ndim(x) == 1:
            return penult[0], logits[0]
        return penult, logits

    def penultimate(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[1]

    def scores(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def loss_and_grads(self, x, y):
        penult, logits, (inputs, pre) = self._forward(x)
        loss, dlogits = cross_entropy(logits, np.atleast_1d(y))
        dcw, dcb, dpen = linear_backward(self.classifier, penult, dlogits)
        w = self.width
        # each s_k feeds the penultimate directly and segment k+1 through its tail
        ds = [dpen[:, k * w:(k + 1) * w] for k in range(4)]
        grads = [None] * 4
        for k in range(3, -1, -1):
            dz = ds[k] * (pre[k] > 0)
            dw, db, dinp = linear_backward(self.segments[k], inputs[k], dz)
            grads[k] = (dw, db)
            if k > 0:
                ds[k - 1] = ds[k - 1] + dinp[:, -w:]
        flat = [g for pair in grads for g in pair]
        return loss, flat + [dcw, dcb]


def spinal_forward(head: SpinalFCHead, x):
    return head.forward(x)


def standard_forward(head: StandardFCHead, x):
    return head.logits(x)


def head_backward(head, x, label):
    """Gradients of the cross-entropy loss w.r.t. every head parameter.

    Returned in the order of ``head.params()``.
    """
    return head.loss_and_grads(x, label)[1]


@dataclass(frozen=True)
class HeadSpec:
    kind: Literal["standard", "spinal"]
    feature_dim: int
    width: int | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "spinal"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.kind == "spinal":
            if self.width is None or self.width <= 0:
                raise ValueError("spinal head needs a positive width")
            if self.feature_dim % 2:
                raise ValueError("spinal head needs an even feature_dim")

    def build(self, rng: np.random.Generator):
        if self.kind == "spinal":
            return SpinalFCHead.init(self.feature_dim, self.width, rng)
        return StandardFCHead.init(self.feature_dim, rng)


def train_head(spec: HeadSpec, train: FeatureTable, cfg: TrainConfig) -> TrainResult:
    if train.dim != spec.feature_dim:
        raise DataError(f"feature table dim {train.dim} != head feature_dim {spec.feature_dim}")
    init_rng, _ = seed_streams(cfg.seed)
    return train_loop(spec.build(init_rng), train, cfg)


def predict_with_head(head, features: FeatureTable) -> PredictionTable:
    if features.dim != head.feature_dim:
        raise DataError(f"feature table dim {features.dim} != head feature_dim {head.feature_dim}")
    scores = head.scores(features.features) if len(features) else np.zeros((0, 2))
    return PredictionTable.from_scores(features.ids, features.labels, scores)


def penultimate_table(head, features: FeatureTable) -> FeatureTable:
    """The head's penultimate activations as a new feature table."""
    if features.dim != head.feature_dim:
        raise DataError(f"feature table dim {features.dim} != head feature_dim {head.feature_dim}")
    out_dim = 4 * head.width if isinstance(head, SpinalFCHead) else head.feature_dim
    vals = head.penultimate(features.features) if len(features) else np.zeros((0, out_dim))
    return FeatureTable(out_dim, features.ids, features.labels, vals)


def accuracy_on(head, table: FeatureTable) -> float:
    pred = predict_with_head(head, table).predicted
    return float((pred == table.labels).mean())


def save_head(head, path) -> None:
    if isinstance(head, SpinalFCHead):
        meta = {"feature_dim": head.feature_dim, "width": head.width}
    else:
        meta = {"feature_dim": head.feature_dim}
    write_model_file(path, head.kind, meta, head.layers())


def load_head(path):
    kind, meta, layers = read_model_file(path)
    if kind == "spinal":
        if len(layers) != 5:
            raise DataError(f"{path}: spinal head needs 5 layers")
        head = SpinalFCHead(layers[:4], layers[4])
    elif kind == "standard":
        if len(layers) != 1:
            raise DataError(f"{path}: standard head needs 1 layer")
        head = StandardFCHead(layers[0])
    else:
        raise DataError(f"{path}: not a head file (kind {kind!r})")
    if "feature_dim" in meta and int(meta["feature_dim"]) != head.feature_dim:
        raise DataError(f"{path}: declared feature_dim disagrees with layer shapes")
    return head
