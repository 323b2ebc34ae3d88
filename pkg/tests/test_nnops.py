import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pathreid.errors import DataError, DivergenceError
from pathreid.nnops import (
    Affine,
    ParamStore,
    adam_step,
    bce_with_logits,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    sigmoid,
)


class TestSigmoid:
    def test_symmetry_point(self):
        assert sigmoid(0.0) == 0.5

    def test_closed_forms(self):
        assert sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)
        assert sigmoid(-math.log(3)) == pytest.approx(0.25, abs=1e-15)

    @given(st.floats(min_value=-500, max_value=500, allow_nan=False))
    def test_symmetry_identity(self, x):
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_and_saturating(self):
        xs = np.linspace(-800, 800, 401)
        ys = sigmoid(xs)
        assert np.all(np.diff(ys) >= 0)
        assert np.all((ys >= 0) & (ys <= 1))
        assert np.all(np.isfinite(ys))


class TestAffine:
    def test_identity(self):
        store = ParamStore()
        layer = Affine(store, "id", 2, 2)
        store.param("id.W")[...] = np.eye(2)
        y, _ = layer.forward(np.array([3.0, 4.0]))
        assert np.array_equal(y, [3.0, 4.0])

    def test_zero_weights_give_bias(self):
        store = ParamStore()
        layer = Affine(store, "z", 3, 2)
        store.param("z.b")[...] = [1.0, 2.0]
        y, _ = layer.forward(np.array([9.0, -4.0, 2.0]))
        assert np.array_equal(y, [1.0, 2.0])

    def test_hand_matrix_multiply(self):
        store = ParamStore()
        layer = Affine(store, "m", 2, 2)
        store.param("m.W")[...] = [[1.0, 2.0], [3.0, 4.0]]
        y, _ = layer.forward(np.array([1.0, 1.0]))
        assert np.array_equal(y, [3.0, 7.0])

    def test_shape_mismatch(self):
        store = ParamStore()
        layer = Affine(store, "s", 3, 2)
        with pytest.raises(ValueError):
            layer.forward(np.zeros(4))

    def test_linearity(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        layer = Affine(store, "lin", 4, 3, rng)
        x, y = rng.normal(size=4), rng.normal(size=4)
        a, b = 0.7, -1.3
        combined, _ = layer.forward(a * x + b * y)
        fx, _ = layer.forward(x)
        fy, _ = layer.forward(y)
        bias = layer.b
        expected = a * (fx - bias) + b * (fy - bias) + bias
        assert np.allclose(combined, expected, atol=1e-12)

    def test_batch_matches_vector(self):
        rng = np.random.default_rng(1)
        store = ParamStore()
        layer = Affine(store, "b", 5, 3, rng)
        xs = rng.normal(size=(4, 5))
        batch, _ = layer.forward(xs)
        for i in range(4):
            single, _ = layer.forward(xs[i])
            assert np.allclose(batch[i], single, atol=1e-12)


class TestOptimizers:
    def test_sgd_definition(self):
        store = ParamStore()
        store.add("w", 1.0)
        store.add_grad("w", np.array(2.0))
        sgd_step(store, 0.1)
        assert store.param("w") == pytest.approx(0.8)
        assert store.grad("w") == 0.0

    def test_sgd_zero_grad_fixed_point(self):
        store = ParamStore()
        store.add("w", [1.5, -2.5])
        sgd_step(store, 0.3)
        assert np.array_equal(store.param("w"), [1.5, -2.5])

    def test_sgd_elementwise(self):
        store = ParamStore()
        store.add("w", [1.0, 1.0])
        store.add_grad("w", np.array([1.0, -1.0]))
        sgd_step(store, 1.0)
        assert np.array_equal(store.param("w"), [0.0, 2.0])

    def test_sgd_skips_buffers(self):
        store = ParamStore()
        store.add("norm", 5.0, trainable=False)
        store.add("w", 1.0)
        store.add_grad("w", np.array(1.0))
        sgd_step(store, 1.0)
        assert store.param("norm") == 5.0

    def test_sgd_non_finite_grad(self):
        store = ParamStore()
        store.add("w", 1.0)
        store.add_grad("w", np.array(np.nan))
        with pytest.raises(DivergenceError):
            sgd_step(store, 0.1)

    def test_adam_zero_grad_first_step(self):
        store = ParamStore()
        store.add("w", [0.4, -0.4])
        adam_step(store, 0.01)
        assert np.array_equal(store.param("w"), [0.4, -0.4])

    def test_adam_first_step_is_signed_lr(self):
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
        store = ParamStore()
        store.add("w", [0.0, 0.0])
        store.add_grad("w", np.array([0.003, -7.0]))
        adam_step(store, 0.1)
        assert np.allclose(store.param("w"), [-0.1, 0.1], rtol=1e-4)

    def test_adam_two_steps_monotone(self):
        store = ParamStore()
        store.add("w", 0.0)
        history = [float(store.param("w"))]
        for _ in range(2):
            store.add_grad("w", np.array(2.0))
            adam_step(store, 0.05)
            history.append(float(store.param("w")))
        assert history[2] < history[1] < history[0]


class TestGradCheck:
    def test_quadratic_exact(self):
        store = ParamStore()
        store.add("x", 3.0)

        def loss():
            x = float(store.param("x"))
            store.add_grad("x", np.array(2.0 * x))
            return x * x

        assert grad_check(loss, store) < 1e-9

    def test_sigmoid_derivative(self):
        store = ParamStore()
        store.add("x", 0.0)

        def loss():
            x = float(store.param("x"))
            s = sigmoid(x)
            store.add_grad("x", np.array(s * (1 - s)))
            return s

        assert grad_check(loss, store) < 1e-8

    def test_affine_chain_random_inputs(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        layer1 = Affine(store, "l1", 4, 3, rng)
        layer2 = Affine(store, "l2", 3, 1, rng)
        x = rng.uniform(-1, 1, size=4)

        def loss():
            h, c1 = layer1.forward(x)
            s = np.tanh(h)
            out, c2 = layer2.forward(s)
            value = sigmoid(float(out[0]))
            dout = np.array([value * (1 - value)])
            ds = layer2.backward(dout, c2)
            layer1.backward(ds * (1 - s * s), c1)
            return value

        assert grad_check(loss, store) < 1e-4

    def test_non_finite_loss_rejected(self):
        store = ParamStore()
        store.add("x", 1.0)
        with pytest.raises(DivergenceError):
            grad_check(lambda: float("nan"), store)


class TestBceWithLogits:
    def test_chance_level(self):
        loss, _ = bce_with_logits(np.zeros(5), np.array([0, 1, 0, 1, 1.0]))
        assert np.allclose(loss, math.log(2))

    def test_gradient_is_prob_minus_label(self):
        z = np.array([0.3, -2.0])
        _, dz = bce_with_logits(z, np.array([1.0, 0.0]))
        assert np.allclose(dz, [sigmoid(0.3) - 1.0, sigmoid(-2.0)])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        store = ParamStore()
        store.add("a.W", rng.normal(size=(3, 4)))
        store.add("a.b", rng.normal(size=3))
        store.add("norm", 123.456, trainable=False)
        path = tmp_path / "model.ckpt"
        save_checkpoint(store, path, seed=42, config_hash="abc")
        loaded, header = load_checkpoint(path)
        assert header["seed"] == 42
        assert header["config_hash"] == "abc"
        for name in store.names():
            assert np.array_equal(store.param(name), loaded.param(name))
            assert store.is_trainable(name) == loaded.is_trainable(name)
        # re-save must reproduce identical bytes
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(loaded, path2, seed=42, config_hash="abc")
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError):
            load_checkpoint(bad)

    def test_rejects_truncation(self, tmp_path):
        store = ParamStore()
        store.add("w", np.arange(10.0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(store, path)
        (tmp_path / "t.ckpt").write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "t.ckpt")
