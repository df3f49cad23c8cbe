"""EL1 (concatenated provider features -> one retrained classifier) and
EL2 (rule-based arbiter over four models, one of them an 8 -> 2
sub-ensemble).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from shoulderx.data import (
    AlignedRows,
    DataError,
    FeatureTable,
    PredictionTable,
    align_feature_tables,
    join_by_sample,
)
from shoulderx.heads import LinearHead
from shoulderx.nn import TrainConfig, TrainResult, read_model_file, seed_streams, train_loop, write_model_file

# ResNeXt50 spinal penultimate, DenseNet169 pooled features, DenseNet201 spinal penultimate
EL1_PROVIDER_DIMS = (80, 1664, 960)

# Sub-ensemble input order: ResNet34 spinal, DenseNet201 spinal, ResNeXt50 spinal, DenseNet169 standard
SUBENSEMBLE_INPUTS = 4


# -- EL1 -------------------------------------------------------------------

def el1_concat(f1, f2, f3, dims: Sequence[int] = EL1_PROVIDER_DIMS) -> np.ndarray:
    """Concatenate provider vectors (or row-aligned matrices) in role order."""
    parts = [np.asarray(f, dtype=np.float64) for f in (f1, f2, f3)]
    for k, (p, d) in enumerate(zip(parts, dims)):
        if p.shape[-1] != d:
            raise ValueError(f"provider {k + 1} must have dim {d}, got {p.shape[-1]}")
    return np.concatenate(parts, axis=-1)


@dataclass
class EL1Model:
    classifier: LinearHead
    provider_dims: tuple[int, ...] = EL1_PROVIDER_DIMS

    def __post_init__(self):
        self.provider_dims = tuple(int(d) for d in self.provider_dims)
        if self.classifier.feature_dim != self.hidden_dim:
            raise ValueError(f"classifier input {self.classifier.feature_dim} != hidden dim {self.hidden_dim}")
        self.classifier.score_fn = "sigmoid"

    @property
    def hidden_dim(self) -> int:
        return sum(self.provider_dims)

    def concat_tables(self, tables: Sequence[FeatureTable]) -> FeatureTable:
        return el1_features(tables, self.provider_dims)


def el1_features(tables: Sequence[FeatureTable], dims: Sequence[int] = EL1_PROVIDER_DIMS) -> FeatureTable:
    if len(tables) != len(dims):
        raise DataError(f"EL1 needs {len(dims)} feature tables, got {len(tables)}")
    for k, (t, d) in enumerate(zip(tables, dims)):
        if t.dim != d:
            raise DataError(f"provider {k + 1} table has dim {t.dim}, expected {d}")
    sizes = {len(t) for t in tables}
    if len(sizes) != 1:
        raise DataError(f"provider tables differ in row count: {[len(t) for t in tables]}")
    aligned = align_feature_tables(tables)
    ref = aligned[0]
    feats = el1_concat(*(t.features for t in aligned), dims=dims) if len(ref) else np.zeros((0, sum(dims)))
    return FeatureTable(sum(dims), ref.ids, ref.labels, feats)


def el1_train(f_tables: Sequence[FeatureTable], cfg: TrainConfig,
              provider_dims: Sequence[int] = EL1_PROVIDER_DIMS) -> TrainResult:
    """Train only the hidden -> 2 classifier on frozen, concatenated features."""
    data = el1_features(f_tables, provider_dims)
    init_rng, _ = seed_streams(cfg.seed)
    head = LinearHead.init(data.dim, init_rng, score_fn="sigmoid")
    result = train_loop(head, data, cfg)
    return TrainResult(EL1Model(head, tuple(provider_dims)), result.history)


def el1_predict(model: EL1Model, f_tables: Sequence[FeatureTable]) -> PredictionTable:
    """Independent per-class sigmoid scores; predicted = argmax, tie -> 0."""
    data = model.concat_tables(f_tables)
    scores = model.classifier.scores(data.features) if len(data) else np.zeros((0, 2))
    return PredictionTable.from_scores(data.ids, data.labels, scores)


def save_el1(model: EL1Model, path) -> None:
    meta = {"provider_dims": ",".join(map(str, model.provider_dims)), "score": "sigmoid"}
    write_model_file(path, "el1", meta, model.classifier.layers())


def load_el1(path) -> EL1Model:
    kind, meta, layers = read_model_file(path)
    if kind != "el1" or len(layers) != 1:
        raise DataError(f"{path}: not an EL1 model file")
    dims = tuple(int(d) for d in meta.get("provider_dims", "").split(",") if d)
    try:
        return EL1Model(LinearHead(layers[0], score_fn="sigmoid"), dims or EL1_PROVIDER_DIMS)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


# -- sub-ensemble ------------------------------------------------------------

INPUT_MODES = ("probabilities", "log")


@dataclass
class SubEnsemble:
    """Linear 8 -> 2 model over the four base models' score pairs."""

    classifier: LinearHead
    input_mode: str = "probabilities"

    def __post_init__(self):
        if self.classifier.feature_dim != 2 * SUBENSEMBLE_INPUTS:
            raise ValueError("sub-ensemble classifier must take 8 inputs")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")


def subensemble_features(pred_tables: Sequence[PredictionTable],
                         input_mode: str = "probabilities") -> FeatureTable:
    """Stack (score0, score1) of each model, in role order, into 8-vectors.

    ``input_mode="log"`` feeds log-scores instead of the scores themselves.
    """
    if len(pred_tables) != SUBENSEMBLE_INPUTS:
        raise DataError(f"sub-ensemble needs {SUBENSEMBLE_INPUTS} prediction tables, got {len(pred_tables)}")
    aligned = join_by_sample(pred_tables)
    x = np.concatenate([t.scores.astype(np.float64) for t in aligned.tables], axis=1)
    if input_mode == "log":
        x = np.log(np.clip(x, 1e-12, None))
    elif input_mode != "probabilities":
        raise ValueError(f"input_mode must be one of {INPUT_MODES}")
    return FeatureTable(2 * SUBENSEMBLE_INPUTS, aligned.ids, aligned.labels, x.reshape(len(aligned), -1))


def subensemble_train(pred_tables: Sequence[PredictionTable], cfg: TrainConfig,
                      input_mode: str = "probabilities") -> TrainResult:
    data = subensemble_features(pred_tables, input_mode)
    init_rng, _ = seed_streams(cfg.seed)
    head = LinearHead.init(data.dim, init_rng)
    result = train_loop(head, data, cfg)
    return TrainResult(SubEnsemble(head, input_mode), result.history)


def subensemble_predict(model: SubEnsemble, pred_tables: Sequence[PredictionTable]) -> PredictionTable:
    data = subensemble_features(pred_tables, model.input_mode)
    scores = model.classifier.scores(data.features) if len(data) else np.zeros((0, 2))
    return PredictionTable.from_scores(data.ids, data.labels, scores)


def save_subensemble(model: SubEnsemble, path) -> None:
    write_model_file(path, "subensemble", {"input_mode": model.input_mode}, model.classifier.layers())


def load_subensemble(path) -> SubEnsemble:
    kind, meta, layers = read_model_file(path)
    if kind != "subensemble" or len(layers) != 1:
        raise DataError(f"{path}: not a sub-ensemble model file")
    try:
        return SubEnsemble(LinearHead(layers[0]), meta.get("input_mode", "probabilities"))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


# -- EL2 -------------------------------------------------------------------

def el2_decide(p1: int, p2: int, p3: int, p4: int) -> int:
    """Final label from the four model labels.

    Models I and II agreeing on abnormal defer to model IV; models III and IV
    agreeing on normal defer to model II; anything else takes model III.
    """
    if p1 == 1 and p2 == 1:
        return p4
    if p3 == 0 and p4 == 0:
        return p2
    return p3


def el2_branch(p1: int, p2: int, p3: int, p4: int) -> int:
    """0-based index of the model whose label :func:`el2_decide` returns."""
    if p1 == 1 and p2 == 1:
        return 3
    if p3 == 0 and p4 == 0:
        return 1
    return 2


@dataclass(frozen=True)
class EL2Spec:
    """Prediction sources in role order.

    m1: abnormal referee A (ResNet34 spinal); m2: abnormal referee B and the
    normal sub-check (DenseNet201 spinal); m3: normal referee A and fallback
    (sub-ensemble); m4: normal referee B and the abnormal sub-check
    (DenseNet169 standard).
    """

    m1: str
    m2: str
    m3: str
    m4: str

    def __post_init__(self):
        if len({self.m1, self.m2, self.m3, self.m4}) != 4:
            raise DataError("EL2 needs four distinct prediction sources")

    @property
    def sources(self) -> tuple[str, str, str, str]:
        return (self.m1, self.m2, self.m3, self.m4)


def load_el2_spec(path) -> EL2Spec:
    """Read ``m1 = <path>`` ... ``m4 = <path>`` lines; relative paths resolve
    against the spec file's directory."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    kv = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{p}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    missing = [k for k in ("m1", "m2", "m3", "m4") if k not in kv]
    if missing:
        raise DataError(f"{p}: missing roles {missing}")
    resolve = lambda s: str(Path(s) if Path(s).is_absolute() else p.parent / s)
    return EL2Spec(*(resolve(kv[k]) for k in ("m1", "m2", "m3", "m4")))


def el2_evaluate(pred_tables: Sequence[PredictionTable] | AlignedRows) -> PredictionTable:
    """Row-wise EL2 over four prediction tables given in role order.

    Each output row carries the score pair of the model that decided it.
    """
    aligned = pred_tables if isinstance(pred_tables, AlignedRows) else join_by_sample(pred_tables)
    if len(aligned.tables) != 4:
        raise DataError(f"EL2 needs 4 prediction tables, got {len(aligned.tables)}")
    preds = np.stack([t.predicted for t in aligned.tables], axis=1)
    branch = np.array([el2_branch(*row) for row in preds], dtype=np.int64).reshape(-1)
    scores = np.stack([t.scores for t in aligned.tables], axis=0)  # (4, n, 2)
    out = scores[branch, np.arange(len(aligned))] if len(aligned) else np.zeros((0, 2), np.float32)
    table = PredictionTable.from_scores(aligned.ids, aligned.labels, out)
    expected = np.array([el2_decide(*row) for row in preds], dtype=np.int64)
    assert np.array_equal(table.predicted, expected.reshape(-1))
    return table
