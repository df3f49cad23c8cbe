import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shoulderx.data import DataError, FeatureTable
from shoulderx.nn import (
    AdamState,
    DenseLayer,
    TrainConfig,
    adam_step,
    cross_entropy,
    linear_backward,
    linear_forward,
    lr_at_epoch,
    read_model_file,
    relu,
    seed_streams,
    sigmoid,
    softmax,
    train_loop,
    write_model_file,
)


class TinyLogistic:
    """Single dense layer trained on softmax cross-entropy; test double for the loop."""

    def __init__(self, in_dim, rng):
        self.layer = DenseLayer.init(in_dim, 2, rng)

    def params(self):
        return self.layer.params()

    def loss_and_grads(self, x, y):
        loss, dlogits = cross_entropy(linear_forward(self.layer, x), y)
        dw, db, _ = linear_backward(self.layer, x, dlogits)
        return loss, [dw, db]

    def predict(self, x):
        return linear_forward(self.layer, x).argmax(axis=1)


def _separable_2d(n=400, seed=7):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0.0, 0.3, size=(n, 2)) + np.where(y[:, None] == 1, 1.5, -1.5)
    return FeatureTable(2, tuple(f"p{i}" for i in range(n)), y, x)


class TestDense:
    def test_identity(self):
        layer = DenseLayer(np.eye(3), np.zeros(3))
        x = np.array([1.0, -2.0, 3.5])
        assert np.array_equal(linear_forward(layer, x), x)

    def test_hand_matmul(self):
        layer = DenseLayer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        assert linear_forward(layer, np.array([1.0, 1.0])).tolist() == [4.0, 8.0]

    def test_zero_input_gives_bias(self):
        layer = DenseLayer(np.ones((2, 3)), np.array([0.5, -0.5]))
        assert linear_forward(layer, np.zeros(3)).tolist() == [0.5, -0.5]

    def test_dimension_mismatch(self):
        layer = DenseLayer(np.ones((2, 3)), np.zeros(2))
        with pytest.raises(ValueError):
            linear_forward(layer, np.zeros(4))

    def test_init_range(self):
        layer = DenseLayer.init(100, 5, np.random.default_rng(0))
        assert layer.weights.shape == (5, 100) and layer.bias.shape == (5,)
        assert np.abs(layer.weights).max() <= 0.1 and np.abs(layer.bias).max() <= 0.1

    def test_backward_matches_finite_differences(self, rng):
        layer = DenseLayer.init(4, 3, rng)
        x = rng.normal(size=(5, 4))
        upstream = rng.normal(size=(5, 3))
        dw, db, dx = linear_backward(layer, x, upstream)

        def f():
            return float((linear_forward(layer, x) * upstream).sum())

        eps = 1e-6
        for arr, grad in ((layer.weights, dw), (layer.bias, db)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                hi = f()
                arr[idx] = old - eps
                lo = f()
                arr[idx] = old
                num[idx] = (hi - lo) / (2 * eps)
            assert np.allclose(grad, num, atol=1e-8)
        assert np.allclose(dx, upstream @ layer.weights)


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_sigmoid_extremes_stable(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            s = sigmoid(np.array([-1000.0, 1000.0]))
        assert s.tolist() == [0.0, 1.0]

    @settings(max_examples=100)
    @given(st.floats(-1e6, 1e6))
    def test_softmax_symmetric_pair(self, a):
        assert softmax(np.array([a, a])).tolist() == [0.5, 0.5]

    def test_softmax_no_overflow(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            p = softmax(np.array([1000.0, 0.0]))
        assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)

    def test_relu(self):
        assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    @settings(max_examples=100)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        assert np.allclose(softmax(x).sum(axis=1), 1.0)


class TestCrossEntropy:
    def test_uniform(self):
        loss, grad = cross_entropy(np.array([0.0, 0.0]), 0)
        assert loss == pytest.approx(np.log(2), abs=1e-6)
        assert grad.tolist() == [-0.5, 0.5]

    def test_confident(self):
        loss, _ = cross_entropy(np.array([10.0, -10.0]), 0)
        assert loss < 1e-4

    def test_gradient_finite_differences(self, rng):
        eps = 1e-6
        for _ in range(20):
            z = rng.normal(0, 3, size=2)
            label = int(rng.integers(0, 2))
            _, g = cross_entropy(z, label)
            num = np.array([
                (cross_entropy(z + eps * e, label)[0] - cross_entropy(z - eps * e, label)[0]) / (2 * eps)
                for e in np.eye(2)])
            assert np.linalg.norm(g - num) / (np.linalg.norm(g) + np.linalg.norm(num)) < 1e-6

    def test_batched_mean(self, rng):
        z = rng.normal(size=(6, 2))
        y = rng.integers(0, 2, 6)
        loss, grad = cross_entropy(z, y)
        singles = [cross_entropy(z[i], y[i]) for i in range(6)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        assert np.allclose(grad, np.array([s[1] for s in singles]) / 6)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = [np.array([1.0, -2.0]), np.array([[3.0]])]
        before = [a.copy() for a in p]
        state = AdamState.zeros_like(p)
        adam_step(p, [np.zeros(2), np.zeros((1, 1))], state, 1e-4)
        assert all(np.array_equal(a, b) for a, b in zip(p, before))

    def test_first_step(self):
        p = [np.array([0.0])]
        adam_step(p, [np.array([0.5])], AdamState.zeros_like(p), 1e-4)
        assert p[0][0] == pytest.approx(-1e-4 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert p[0][0] == pytest.approx(-1.0e-4, abs=1e-9)

    def test_two_step_trajectory(self):
        # hand-iterated recurrences for constant g = 0.5
        p = [np.array([1.0])]
        state = AdamState.zeros_like(p)
        step = 1e-4 * 0.5 / (0.5 + 1e-8)
        adam_step(p, [np.array([0.5])], state, 1e-4)
        assert state.m[0][0] == pytest.approx(0.05, abs=1e-15)
        assert state.v[0][0] == pytest.approx(0.00025, abs=1e-15)
        assert p[0][0] == pytest.approx(1.0 - step, abs=1e-15)
        adam_step(p, [np.array([0.5])], state, 1e-4)
        assert state.t == 2
        assert state.m[0][0] == pytest.approx(0.095, abs=1e-15)
        assert state.v[0][0] == pytest.approx(0.00049975, abs=1e-15)
        assert p[0][0] == pytest.approx(1.0 - 2 * step, abs=1e-14)

    def test_shape_mismatch(self):
        p = [np.zeros(2)]
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(3)], AdamState.zeros_like(p), 1e-4)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-4), (9, 1e-4), (10, 1e-5), (25, 1e-6), (39, 1e-7)])
    def test_step_decay(self, epoch, lr):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(lr, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), 40)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr0, cfg.epochs, cfg.batch_size) == (1e-4, 40, 32)

    @pytest.mark.parametrize("kw", [dict(lr0=0), dict(epochs=0), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainLoop:
    def _run(self, data, cfg):
        init_rng, _ = seed_streams(cfg.seed)
        return train_loop(TinyLogistic(data.dim, init_rng), data, cfg)

    def test_deterministic(self):
        data = _separable_2d()
        cfg = TrainConfig(lr0=1e-2, epochs=5, seed=3)
        a, b = self._run(data, cfg), self._run(data, cfg)
        assert np.array_equal(a.model.layer.weights, b.model.layer.weights)
        assert a.history == b.history

    def test_separable_reaches_99(self):
        data = _separable_2d()
        res = self._run(data, TrainConfig(lr0=1e-2, seed=1))
        assert (res.model.predict(data.features) == data.labels).mean() >= 0.99
        assert len(res.history) == 40 and res.history[-1] < res.history[0]

    def test_history_finite_on_random_data(self, rng):
        data = FeatureTable(6, tuple(f"r{i}" for i in range(50)), rng.integers(0, 2, 50),
                            rng.normal(0, 100, size=(50, 6)))
        res = self._run(data, TrainConfig(lr0=1e-1, epochs=10))
        assert np.all(np.isfinite(res.history))

    def test_empty_table(self):
        data = FeatureTable(2, (), [], np.zeros((0, 2)))
        with pytest.raises(DataError):
            self._run(data, TrainConfig())

    def test_seed_streams_independent(self):
        a, b = seed_streams(5)
        assert not np.array_equal(a.random(4), b.random(4))
        a2, _ = seed_streams(5)
        assert np.array_equal(seed_streams(5)[0].random(4), a2.random(4))


class TestModelFile:
    def test_round_trip_exact(self, tmp_path, rng):
        layers = [DenseLayer.init(7, 3, rng), DenseLayer.init(3, 2, rng)]
        write_model_file(tmp_path / "m.txt", "demo", {"width": 3, "mode": "x"}, layers)
        kind, meta, back = read_model_file(tmp_path / "m.txt")
        assert kind == "demo" and meta == {"width": "3", "mode": "x"}
        for a, b in zip(layers, back):
            assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.txt").write_text("not a model\n")
        with pytest.raises(DataError):
            read_model_file(tmp_path / "m.txt")
