"""Dense layers, losses, Adam with Polyak averaging, checkpoints."""

import numpy as np
import pytest

from numerics import (
    Checkpoint, MlpParams, NumericsError, OptimizerState, adam_step, aucroc_loss, backward,
    checkpoint_id, dropout_mask, dtype_of, load_checkpoint, mlp_forward, save_checkpoint, set_debug_mode,
    sigmoid_xent, softmax_xent
)
from schemas import OptimizerConfig


def numeric_grad(fn, array, index, eps=1e-6):
    old = array[index]
    array[index] = old + eps
    up = fn()
    array[index] = old - eps
    down = fn()
    array[index] = old
    return (up - down) / (2 * eps)


@pytest.fixture
def mlp():
    store = {}
    params = MlpParams.create(store, "m", (4, 5, 3), np.random.default_rng(0), np.float64)
    return store, params


class TestMlp:

    def test_shapes_and_names(self, mlp):
        store, params = mlp
        assert sorted(store) == ["m/b0", "m/b1", "m/w0", "m/w1"]
        assert (params.input_size, params.output_size) == (4, 3)
        assert [l.activation for l in params.layers] == ["relu", "identity"]

    def test_duplicate_names_are_rejected(self, mlp):
        store, _ = mlp
        with pytest.raises(NumericsError):
            MlpParams.create(store, "m", (4, 2), np.random.default_rng(0))

    def test_gradients_match_finite_differences(self, mlp):
        store, params = mlp
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 4))
        target = rng.normal(size=(6, 3))

        def loss():
            out, _ = mlp_forward(params, x)
            return 0.5 * ((out - target) ** 2).sum()

        out, tape = mlp_forward(params, x)
        grads, g_x = backward(tape, out - target)
        for name in store:
            for index in [tuple(rng.integers(0, s) for s in store[name].shape) for _ in range(3)]:
                assert grads[name][index] == pytest.approx(numeric_grad(loss, store[name], index), rel=1e-5, abs=1e-8)
        assert g_x[2, 1] == pytest.approx(numeric_grad(loss, x, (2, 1)), rel=1e-5, abs=1e-8)

    def test_tape_is_single_use(self, mlp):
        _, params = mlp
        out, tape = mlp_forward(params, np.ones((2, 4)))
        backward(tape, np.ones_like(out))
        with pytest.raises(NumericsError, match="consumed"):
            backward(tape, np.ones_like(out))

    def test_shape_mismatch(self, mlp):
        _, params = mlp
        with pytest.raises(NumericsError):
            mlp_forward(params, np.ones((2, 5)))

    def test_dropout_needs_rng_and_only_runs_in_training(self, mlp):
        _, params = mlp
        x = np.ones((3, 4))
        with pytest.raises(NumericsError):
            mlp_forward(params, x, dropout_keep=0.5, training=True)
        plain, _ = mlp_forward(params, x)
        eval_mode, _ = mlp_forward(params, x, dropout_keep=0.5, training=False)
        np.testing.assert_array_equal(plain, eval_mode)

    def test_dropout_keeps_the_expectation(self):
        masks = dropout_mask((10_000, 4), 0.7, np.random.default_rng(3), np.dtype(np.float64))
        assert abs(masks.mean() - 1.0) < 0.02
        np.testing.assert_allclose(np.unique(masks), [0.0, 1.0 / 0.7])

    def test_debug_mode_catches_non_finite_input(self, mlp):
        _, params = mlp
        set_debug_mode(True)
        try:
            with pytest.raises(NumericsError):
                mlp_forward(params, np.full((1, 4), np.nan))
        finally:
            set_debug_mode(False)


class TestLosses:

    def test_softmax_xent(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
        labels = np.array([1, 0])
        loss, grad = softmax_xent(logits, labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        assert loss == pytest.approx(-(np.log(p[0, 1]) + np.log(p[1, 0])) / 2)
        assert grad[0, 0] == pytest.approx(numeric_grad(lambda: softmax_xent(logits, labels)[0], logits, (0, 0)))

    def test_softmax_label_range(self):
        with pytest.raises(NumericsError):
            softmax_xent(np.zeros((1, 3)), np.array([3]))

    def test_sigmoid_xent_is_stable(self):
        loss, grad = sigmoid_xent(np.array([1000.0, -1000.0]), np.array([1, 0]))
        assert loss == pytest.approx(0.0)
        assert np.all(np.isfinite(grad))
        loss, _ = sigmoid_xent(np.array([-1000.0]), np.array([1]))
        assert loss == pytest.approx(1000.0)

    def test_sigmoid_xent_scalar(self):
        loss, grad = sigmoid_xent(0.0, 1.0)
        assert loss == pytest.approx(np.log(2.0))
        assert float(grad) == pytest.approx(-0.5)

    def test_aucroc_value(self):
        logits = np.array([2.0, 0.0, 1.0])
        labels = np.array([1, 0, 0])
        goals = np.array([0, 0, 1])
        loss, _ = aucroc_loss(logits, labels, goals, same_goal_weight=2.0)
        expected = 2.0 * np.log1p(np.exp(-2.0)) + 1.0 * np.log1p(np.exp(-1.0))
        assert loss == pytest.approx(expected)

    def test_aucroc_gradient(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=8)
        labels = np.array([1, 0, 0, 1, 0, 0, 0, 0])
        goals = np.array([0, 0, 0, 1, 1, 1, 0, 1])
        for reduction in ("sum", "mean"):
            _, grad = aucroc_loss(logits, labels, goals, 2.0, reduction)
            for i in range(8):
                numeric = numeric_grad(lambda: aucroc_loss(logits, labels, goals, 2.0, reduction)[0], logits, i)
                assert grad[i] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_aucroc_matches_a_double_loop(self):
        rng = np.random.default_rng(12)

        def double_loop(logits, labels, goals, weight):
            total = 0.0
            for i in range(len(logits)):
                for j in range(len(logits)):
                    if labels[i] and not labels[j]:
                        w = weight if goals[i] == goals[j] else 1.0
                        total += w * np.log1p(np.exp(-(logits[i] - logits[j])))
            return total

        for _ in range(50):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = (1, 0)
            goals = rng.integers(0, 4, size=n)
            logits = rng.normal(scale=3.0, size=n)
            loss, _ = aucroc_loss(logits, labels, goals, 2.0)
            assert loss == pytest.approx(double_loop(logits, labels, goals, 2.0), rel=1e-12)

    def test_aucroc_needs_both_classes(self):
        with pytest.raises(NumericsError):
            aucroc_loss(np.zeros(3), np.zeros(3), np.zeros(3))


class TestAdam:

    def test_learning_rate_decay(self):
        state = OptimizerState.create({"w": np.zeros(1)}, OptimizerConfig(learning_rate=1e-4, decay_rate=0.98,
                                                                           decay_steps=1000))
        assert state.learning_rate(1) == pytest.approx(1e-4)
        assert state.learning_rate(1001) == pytest.approx(0.98e-4)
        assert state.learning_rate(2001) == pytest.approx(0.98 ** 2 * 1e-4)

    def test_first_step_moves_by_the_learning_rate(self):
        params = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
        state = OptimizerState.create(params, OptimizerConfig(learning_rate=0.1, polyak_rate=0.9))
        assert adam_step(state, params, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(params["w"], [0.9, -1.9], rtol=1e-6)
        np.testing.assert_array_equal(params["b"], [0.5])  # no gradient, no moment
        np.testing.assert_allclose(state.shadow["w"], 0.9 * np.array([1.0, -2.0]) + 0.1 * params["w"])
        assert state.step == 1

    def test_three_steps_with_a_constant_gradient(self):
        params = {"w": np.array([1.0])}
        config = OptimizerConfig(learning_rate=0.1, decay_rate=1.0)
        state = OptimizerState.create(params, config)
        trajectory = []
        for _ in range(3):
            adam_step(state, params, {"w": np.array([0.5])})
            trajectory.append(params["w"][0])
        # bias-corrected moments equal g and g^2, so each step is lr * g / (|g| + eps)
        step = 0.1 * 0.5 / (0.5 + 1e-8)
        np.testing.assert_allclose(trajectory, [1.0 - step, 1.0 - 2 * step, 1.0 - 3 * step], rtol=1e-12)
        assert state.m["w"][0] == pytest.approx((1 - 0.9 ** 3) * 0.5, rel=1e-12)
        assert state.v["w"][0] == pytest.approx((1 - 0.999 ** 3) * 0.25, rel=1e-12)

    def test_non_finite_gradient_rejects_the_step(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState.create(params)
        assert not adam_step(state, params, {"w": np.array([np.inf])})
        assert state.step == 0
        np.testing.assert_array_equal(params["w"], [1.0])
        np.testing.assert_array_equal(state.m["w"], [0.0])

    def test_unknown_or_misshaped_gradients(self):
        params = {"w": np.zeros(2)}
        state = OptimizerState.create(params)
        with pytest.raises(NumericsError):
            adam_step(state, params, {"v": np.zeros(2)})
        with pytest.raises(NumericsError):
            adam_step(state, params, {"w": np.zeros(3)})

    def test_shadow_trails_the_parameters(self):
        params = {"w": np.zeros(1)}
        state = OptimizerState.create(params, OptimizerConfig(learning_rate=0.01, polyak_rate=0.9999))
        for _ in range(10):
            adam_step(state, params, {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(-0.1, rel=1e-3)
        assert -0.1 < state.shadow["w"][0] < 0.0


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        params = {"a/w0": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2, dtype=np.float32)}
        state = OptimizerState.create(params)
        adam_step(state, params, {"b": np.ones(2, dtype=np.float32)})
        path = tmp_path / "ckpt.npz"
        ckpt_id = save_checkpoint(path, params, state, {"note": "x"})
        loaded = load_checkpoint(path)
        assert isinstance(loaded, Checkpoint)
        assert loaded.step == 1
        assert loaded.meta["note"] == "x"
        assert loaded.meta["checkpoint_id"] == ckpt_id == checkpoint_id(loaded.params)
        for name in params:
            np.testing.assert_array_equal(loaded.params[name], params[name])
            np.testing.assert_array_equal(loaded.shadow[name], state.shadow[name])
        assert loaded.optimizer_state().step == 1
        assert not (tmp_path / "ckpt.npz.tmp").exists()

    def test_id_depends_on_values(self):
        a = {"w": np.zeros(2)}
        b = {"w": np.array([0.0, 1e-12])}
        assert checkpoint_id(a) != checkpoint_id(b)
        assert checkpoint_id(a) == checkpoint_id({"w": np.zeros(2)})

    def test_missing_file(self, tmp_path):
        with pytest.raises(NumericsError, match="not found"):
            load_checkpoint(tmp_path / "nope.npz")

    def test_precision(self):
        assert dtype_of("float64") == np.float64
        with pytest.raises(NumericsError):
            dtype_of("float16")
