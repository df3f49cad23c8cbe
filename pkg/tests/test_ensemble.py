import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shoulderx.data import DataError, FeatureTable, PredictionTable
from shoulderx.ensemble import (
    EL1_PROVIDER_DIMS,
    EL1Model,
    EL2Spec,
    SubEnsemble,
    el1_concat,
    el1_features,
    el1_predict,
    el1_train,
    el2_decide,
    el2_evaluate,
    load_el1,
    load_el2_spec,
    load_subensemble,
    save_el1,
    save_subensemble,
    subensemble_features,
    subensemble_predict,
    subensemble_train,
)
from shoulderx.heads import HeadSpec, LinearHead, accuracy_on, train_head
from shoulderx.metrics import full_report
from shoulderx.nn import DenseLayer, TrainConfig, sigmoid
from conftest import DATA_DIR, random_prediction_table
from gradcheck import randomize, worst_error

SUB_CFG = TrainConfig(seed=0, batch_size=1)


def literal_trace(pred_1, pred_2, pred_3, pred_4):
    """Line-by-line transcription of the arbiter pseudocode, main checks read as
    'both equal 1' and 'both equal 0'."""
    final_pred = None
    if pred_1 == 1 and pred_2 == 1:
        if pred_4 == 1:
            final_pred = 1
        if pred_4 == 0:
            final_pred = 0
    elif pred_3 == 0 and pred_4 == 0:
        if pred_2 == 1:
            final_pred = 1
        if pred_2 == 0:
            final_pred = 0
    else:
        final_pred = pred_3
    return final_pred


def _labels_table(ids, labels, preds, seed=0):
    rng = np.random.default_rng(seed)
    margin = rng.uniform(0.05, 0.45, len(ids))
    s1 = np.where(np.asarray(preds) == 1, 0.5 + margin, 0.5 - margin)
    return PredictionTable.from_scores(ids, labels, np.stack([1 - s1, s1], axis=1))


class TestEL1Concat:
    def test_length(self):
        out = el1_concat(np.ones(80), np.ones(1664), np.ones(960))
        assert out.shape == (2704,) and sum(EL1_PROVIDER_DIMS) == 2704

    def test_zeros(self):
        assert not el1_concat(np.zeros(80), np.zeros(1664), np.zeros(960)).any()

    def test_offsets(self, rng):
        f1, f2, f3 = rng.normal(size=80), rng.normal(size=1664), rng.normal(size=960)
        out = el1_concat(f1, f2, f3)
        assert out[80] == f2[0] and out[80 + 1664] == f3[0] and out[79] == f1[-1]

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            el1_concat(np.ones(81), np.ones(1664), np.ones(960))

    @settings(max_examples=100)
    @given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)))
    def test_injective(self, a, b):
        dims = (1, 3, 2)
        ca = el1_concat(a[:1], a[1:4], a[4:], dims)
        cb = el1_concat(b[:1], b[1:4], b[4:], dims)
        assert np.array_equal(ca, cb) == np.array_equal(a, b)


class TestEL1:
    def test_model_dims(self, rng):
        model = EL1Model(LinearHead.init(2704, rng))
        assert model.hidden_dim == 2704 and model.classifier.classifier.out_dim == 2
        assert model.classifier.score_fn == "sigmoid"

    def test_wrong_hidden_dim(self, rng):
        with pytest.raises(ValueError):
            EL1Model(LinearHead.init(2703, rng))

    def _tiny(self, bias):
        head = LinearHead(DenseLayer(np.zeros((2, 3)), np.asarray(bias, dtype=float)))
        return EL1Model(head, (1, 1, 1))

    def _tables(self, x, labels):
        ids = tuple(f"e{i}" for i in range(len(labels)))
        return [FeatureTable(1, ids, labels, x[:, k:k + 1]) for k in range(3)]

    def test_sigmoid_scores(self):
        p = el1_predict(self._tiny([2.0, -2.0]), self._tables(np.zeros((1, 3)), [0]))
        assert p.scores[0] == pytest.approx([0.8808, 0.1192], abs=1e-4)

    def test_zero_logits_tie(self):
        p = el1_predict(self._tiny([0.0, 0.0]), self._tables(np.zeros((1, 3)), [1]))
        assert p.scores[0].tolist() == [0.5, 0.5] and p.predicted[0] == 0

    def test_per_class_auc_can_differ(self, rng):
        # class-0 logit reads provider 1, class-1 logit reads provider 2; independent sigmoids
        model = self._tiny([0.0, 0.0])
        model.classifier.classifier.weights[:] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        y = np.r_[np.zeros(50, int), np.ones(50, int)]
        x = rng.normal(size=(100, 3))
        x[:, 0] -= 0.5 * y
        x[:, 1] += 1.5 * y
        r = full_report(el1_predict(model, self._tables(x, y)))
        assert abs(r.auc_class0 - r.auc_class1) > 0.05

    @settings(max_examples=100)
    @given(arrays(np.float64, 2, elements=st.floats(-30, 30)))
    def test_sigmoid_preserves_argmax(self, z):
        s = sigmoid(z)
        if s[1] > s[0]:
            assert z[1] > z[0]
        # gaps far below float resolution of the scores collapse to a tie
        if abs(z[1] - z[0]) > 1e-9:
            assert (s[1] > s[0]) == (z[1] > z[0])

    def test_train_beats_or_matches_single_heads(self, providers):
        train, _ = providers
        cfg = TrainConfig(seed=4)
        el1 = el1_train(train, cfg).model
        el1_acc = full_report(el1_predict(el1, train)).accuracy
        for t in train:
            single = train_head(HeadSpec("standard", t.dim), t, cfg).model
            assert el1_acc >= accuracy_on(single, t)

    def test_train_deterministic(self, providers):
        train, _ = providers
        cfg = TrainConfig(seed=4, epochs=2)
        a, b = el1_train(train, cfg), el1_train(train, cfg)
        assert np.array_equal(a.model.classifier.classifier.weights, b.model.classifier.classifier.weights)

    def test_row_count_mismatch(self, providers):
        train, _ = providers
        with pytest.raises(DataError, match="row count"):
            el1_features([train[0], train[1].take(range(10)), train[2]])

    def test_alignment_by_id(self, providers):
        train, _ = providers
        shuffled = train[1].take(np.random.default_rng(0).permutation(len(train[1])))
        assert el1_features([train[0], shuffled, train[2]]) == el1_features(train)

    def test_gradient_subset(self):
        rng = np.random.default_rng(7)
        head = LinearHead.init(2704, rng, score_fn="sigmoid")
        for _ in range(5):
            randomize(head, rng, scale=0.02)
            coords = {0: rng.choice(2 * 2704, 40, replace=False).tolist()}
            assert worst_error(head, rng.normal(size=(1, 2704)), np.array([1]), coords=coords) < 1e-4

    def test_save_load(self, tmp_path, providers):
        train, _ = providers
        model = el1_train(train, TrainConfig(epochs=1)).model
        save_el1(model, tmp_path / "el1.model")
        back = load_el1(tmp_path / "el1.model")
        assert back.provider_dims == EL1_PROVIDER_DIMS
        assert el1_predict(back, train) == el1_predict(model, train)


class TestSubEnsemble:
    def test_input_dim_eight(self, rng):
        tables = [random_prediction_table(12, np.random.default_rng(k)) for k in range(4)]
        for t in tables[1:]:
            assert t.ids == tables[0].ids
        labels = tables[0].labels
        tables = [PredictionTable.from_scores(t.ids, labels, t.scores) for t in tables]
        feats = subensemble_features(tables)
        assert feats.dim == 8
        assert np.array_equal(feats.features[:, 2:4], tables[1].scores.astype(np.float64))

    def test_needs_four(self, rng):
        with pytest.raises(DataError):
            subensemble_features([random_prediction_table(3, rng)] * 3)

    def test_classifier_shape(self, rng):
        with pytest.raises(ValueError):
            SubEnsemble(LinearHead.init(6, rng))

    def test_perfect_inputs_train_to_99(self):
        rng = np.random.default_rng(3)
        ids = [f"q{i}" for i in range(200)]
        y = rng.integers(0, 2, 200)
        tables = [_labels_table(ids, y, y, seed=k) for k in range(4)]
        for mode in ("probabilities", "log"):
            model = subensemble_train(tables, SUB_CFG, input_mode=mode).model
            assert full_report(subensemble_predict(model, tables)).accuracy >= 0.99

    def test_deterministic(self, rng):
        ids = [f"q{i}" for i in range(30)]
        y = rng.integers(0, 2, 30)
        tables = [_labels_table(ids, y, y, seed=k) for k in range(4)]
        cfg = TrainConfig(seed=1, epochs=3)
        a, b = subensemble_train(tables, cfg), subensemble_train(tables, cfg)
        assert np.array_equal(a.model.classifier.classifier.weights, b.model.classifier.classifier.weights)

    def test_gradient_hundred_points(self):
        rng = np.random.default_rng(8)
        head = LinearHead.init(8, rng)
        for _ in range(100):
            randomize(head, rng)
            assert worst_error(head, rng.random((1, 8)), np.array([rng.integers(0, 2)])) < 1e-4

    def test_save_load(self, tmp_path, rng):
        ids = [f"q{i}" for i in range(20)]
        y = rng.integers(0, 2, 20)
        tables = [_labels_table(ids, y, y, seed=k) for k in range(4)]
        model = subensemble_train(tables, TrainConfig(epochs=1), input_mode="log").model
        save_subensemble(model, tmp_path / "sub.model")
        back = load_subensemble(tmp_path / "sub.model")
        assert back.input_mode == "log"
        assert subensemble_predict(back, tables) == subensemble_predict(model, tables)


class TestEL2Decide:
    @pytest.mark.parametrize("preds,want", [
        ((1, 1, 0, 1), 1), ((1, 1, 1, 0), 0), ((0, 1, 0, 0), 1), ((1, 0, 1, 1), 1), ((0, 0, 0, 0), 0)])
    def test_hand_traces(self, preds, want):
        assert el2_decide(*preds) == want

    def test_matches_literal_trace(self):
        for preds in itertools.product((0, 1), repeat=4):
            assert el2_decide(*preds) == literal_trace(*preds)

    def test_matches_pinned_file(self):
        with open(DATA_DIR / "el2_truth_table.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16
        for r in rows:
            p = tuple(int(r[k]) for k in ("p1", "p2", "p3", "p4"))
            assert el2_decide(*p) == int(r["final"]) == literal_trace(*p)

    def test_output_is_an_input(self):
        for p in itertools.product((0, 1), repeat=4):
            out = el2_decide(*p)
            assert out in p
            main_check = (p[0] == 1 and p[1] == 1) or (p[2] == 0 and p[3] == 0)
            if p[1] == p[3] and main_check:
                assert out == p[1]


class TestEL2Evaluate:
    def test_unanimous(self, rng):
        ids = [f"u{i}" for i in range(25)]
        y = rng.integers(0, 2, 25)
        p = rng.integers(0, 2, 25)
        out = el2_evaluate([_labels_table(ids, y, p, seed=k) for k in range(4)])
        assert np.array_equal(out.predicted, p)

    def test_scores_come_from_deciding_model(self):
        ids = ["a", "b", "c"]
        # row a: branch 1 -> model 4; row b: branch 2 -> model 2; row c: fallback -> model 3
        rows = [(1, 1, 0, 1), (0, 1, 0, 0), (1, 0, 1, 1)]
        tables = [_labels_table(ids, [1, 0, 1], [r[k] for r in rows], seed=k) for k in range(4)]
        out = el2_evaluate(tables)
        assert np.array_equal(out.scores[0], tables[3].scores[0])
        assert np.array_equal(out.scores[1], tables[1].scores[1])
        assert np.array_equal(out.scores[2], tables[2].scores[2])
        assert out.predicted.tolist() == [1, 1, 1]

    def test_complementary_errors(self):
        # each pattern is resolved correctly by EL2 yet at least one model is wrong in it
        patterns = [((1, 1, 0, 1), 1), ((0, 1, 1, 0), 1), ((1, 1, 1, 0), 0), ((0, 0, 0, 0), 0),
                    ((0, 1, 0, 0), 1), ((1, 0, 1, 1), 1), ((1, 0, 0, 0), 0)]
        rows = [p for p in patterns for _ in range(5)]
        ids = [f"c{i}" for i in range(len(rows))]
        y = [r[1] for r in rows]
        tables = [_labels_table(ids, y, [r[0][k] for r in rows], seed=k) for k in range(4)]
        el2_acc = full_report(el2_evaluate(tables)).accuracy
        assert el2_acc == 1.0
        for t in tables:
            assert full_report(t).accuracy < el2_acc

    def test_alignment_error(self, rng):
        t = random_prediction_table(5, rng)
        short = t.take(range(4))
        with pytest.raises(DataError):
            el2_evaluate([t, t, t, short])


class TestEL2Spec:
    def test_distinct_sources(self):
        with pytest.raises(DataError):
            EL2Spec("a", "b", "c", "a")

    def test_load_relative(self, tmp_path):
        (tmp_path / "el2.txt").write_text("# roles\nm1 = r34.csv\nm2 = d201.csv\nm3 = sub.csv\nm4 = /abs/d169.csv\n")
        spec = load_el2_spec(tmp_path / "el2.txt")
        assert spec.m1 == str(tmp_path / "r34.csv") and spec.m4 == "/abs/d169.csv"

    def test_missing_role(self, tmp_path):
        (tmp_path / "el2.txt").write_text("m1 = a\nm2 = b\nm3 = c\n")
        with pytest.raises(DataError, match="m4"):
            load_el2_spec(tmp_path / "el2.txt")
