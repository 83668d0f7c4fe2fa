import math

import numpy as np
import pytest

from dpfed import model


def fd_gradient(params, batch, h=1e-5):
    """Central finite differences of the loss; independent of backward()."""
    grad = np.empty_like(params.values)
    for i in range(params.values.size):
        plus = params.values.copy()
        plus[i] += h
        minus = params.values.copy()
        minus[i] -= h
        lp, _ = model.forward_loss(model.ModelParams(plus, params.arch), batch)
        lm, _ = model.forward_loss(model.ModelParams(minus, params.arch), batch)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def random_batch(rng, n, dim, classes):
    return model.Batch(
        features=rng.uniform(0, 1, size=(n, dim)),
        labels=rng.integers(0, classes, size=n),
    )


class TestInitParams:
    def test_param_count_mnist_arch(self):
        p = model.init_params([784, 200, 200, 10], seed=1)
        assert p.values.shape == (199210,)

    def test_deterministic(self):
        a = model.init_params([784, 200, 200, 10], seed=1)
        b = model.init_params([784, 200, 200, 10], seed=1)
        assert np.array_equal(a.values, b.values)
        c = model.init_params([784, 200, 200, 10], seed=2)
        assert not np.array_equal(a.values, c.values)

    def test_biases_zero(self):
        p = model.init_params([2, 2], seed=123)
        assert p.values[4] == 0.0 and p.values[5] == 0.0

    def test_glorot_limits(self):
        p = model.init_params([50, 30], seed=0)
        limit = math.sqrt(6.0 / 80)
        weights = p.values[: 50 * 30]
        assert np.all(np.abs(weights) <= limit)

    def test_degenerate_arch_rejected(self):
        with pytest.raises(ValueError):
            model.init_params([784], seed=0)
        with pytest.raises(ValueError):
            model.init_params([784, 0, 10], seed=0)


class TestForwardLoss:
    def test_zero_net_uniform_softmax(self):
        p = model.ModelParams(np.zeros(model.param_count([2, 2])), (2, 2))
        batch = model.Batch(np.array([[0.3, 0.9]]), np.array([1]))
        loss, probs = model.forward_loss(p, batch)
        assert np.allclose(probs, 0.5, atol=1e-15)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = model.init_params([12, 7, 5], seed=5)
        batch = random_batch(rng, 20, 12, 5)
        _, probs = model.forward_loss(p, batch)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_hand_built_2x2_net(self):
        # weights [[1, -1], [0.5, 0]], bias [0.1, -0.2], three samples
        values = np.array([1.0, -1.0, 0.5, 0.0, 0.1, -0.2])
        p = model.ModelParams(values, (2, 2))
        feats = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        labels = np.array([0, 1, 1])
        # logits: x @ W + b, computed independently per sample
        expected = 0.0
        for x, y in zip(feats, labels):
            z0 = x[0] * 1.0 + x[1] * 0.5 + 0.1
            z1 = x[0] * -1.0 + x[1] * 0.0 - 0.2
            e0, e1 = math.exp(z0), math.exp(z1)
            prob = (e0, e1)[y] / (e0 + e1)
            expected -= math.log(prob)
        expected /= 3
        loss, _ = model.forward_loss(p, model.Batch(feats, labels))
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss >= 0

    def test_dimension_mismatch(self):
        p = model.init_params([3, 2], seed=0)
        with pytest.raises(ValueError):
            model.forward_loss(p, model.Batch(np.zeros((1, 4)), np.array([0])))


class TestBackward:
    def test_finite_differences_10_params(self):
        # arch [2, 2] has 6 params; [1, 2] has 4; use [2, 2] plus batch
        rng = np.random.default_rng(0)
        p = model.init_params([2, 2], seed=3)
        batch = random_batch(rng, 4, 2, 2)
        got = model.backward(p, batch)
        want = fd_gradient(p, batch)
        denom = np.maximum(np.abs(want), 1e-8)
        assert np.max(np.abs(got - want) / denom) < 1e-5

    @pytest.mark.parametrize("trial", range(20))
    def test_finite_differences_random_small_nets(self, trial):
        rng = np.random.default_rng(100 + trial)
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 4)))]
        if model.param_count(sizes) > 50:
            sizes = [2, 3, 2]
        p = model.init_params(sizes, seed=trial)
        batch = random_batch(rng, int(rng.integers(1, 6)), sizes[0], sizes[-1])
        got = model.backward(p, batch)
        want = fd_gradient(p, batch)
        denom = np.maximum(np.abs(want), 1e-8)
        assert np.max(np.abs(got - want) / denom) < 1e-5

    def test_output_bias_gradient_is_mean_residual(self):
        # zero weights: probs are uniform, so bias gradient = mean(probs - onehot)
        arch = (3, 4)
        p = model.ModelParams(np.zeros(model.param_count(arch)), arch)
        feats = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0]])
        balanced = np.array([0, 1, 2, 3])
        grad = model.backward(p, model.Batch(feats, balanced))
        assert np.allclose(grad[12:], np.zeros(4), atol=1e-15)

        skewed = np.array([0, 0, 0, 3])
        grad = model.backward(p, model.Batch(feats, skewed))
        onehot_mean = np.array([0.75, 0.0, 0.0, 0.25])
        assert np.allclose(grad[12:], 0.25 - onehot_mean, atol=1e-15)

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(9)
        p = model.init_params([5, 4, 3], seed=9)
        batch = random_batch(rng, 6, 5, 3)
        doubled = model.Batch(
            features=np.vstack([batch.features, batch.features]),
            labels=np.concatenate([batch.labels, batch.labels]),
        )
        assert np.allclose(model.backward(p, batch), model.backward(p, doubled), atol=1e-14)


class TestSgdStep:
    def test_zero_gradient_no_change(self):
        p = model.init_params([3, 2], seed=1)
        q = model.sgd_step(p, np.zeros_like(p.values), eta=0.5)
        assert np.array_equal(p.values, q.values)

    def test_arithmetic(self):
        p = model.ModelParams(np.array([1.0, 1.0]), (1, 1))
        q = model.sgd_step(p, np.array([0.5, -0.5]), eta=1.0)
        assert np.array_equal(q.values, [0.5, 1.5])

    def test_linearity_of_fixed_gradients(self):
        p = model.init_params([2, 2], seed=4)
        g = np.arange(6, dtype=float)
        two_steps = model.sgd_step(model.sgd_step(p, g, 0.1), g, 0.1)
        one_step = model.sgd_step(p, 2 * g, 0.1)
        assert np.allclose(two_steps.values, one_step.values, atol=1e-15)

    def test_length_mismatch(self):
        p = model.init_params([2, 2], seed=4)
        with pytest.raises(ValueError):
            model.sgd_step(p, np.zeros(5), eta=0.1)


class TestEvaluate:
    def test_zero_net_ties_break_to_class_zero(self):
        arch = (4, 10)
        p = model.ModelParams(np.zeros(model.param_count(arch)), arch)
        rng = np.random.default_rng(2)
        feats = rng.uniform(0, 1, size=(50, 4))
        labels = rng.integers(0, 10, size=50)
        acc = model.evaluate(p, feats, labels)
        assert acc == pytest.approx(np.mean(labels == 0))

    def test_perfect_predictions(self):
        # big positive weight from feature j to class j makes argmax follow input
        arch = (3, 3)
        values = np.zeros(model.param_count(arch))
        values[:9] = (np.eye(3) * 50).ravel()
        p = model.ModelParams(values, arch)
        feats = np.eye(3)
        assert model.evaluate(p, feats, np.array([0, 1, 2])) == 1.0

    def test_half_correct(self):
        arch = (2, 2)
        values = np.zeros(model.param_count(arch))
        values[:4] = np.array([[10.0, -10.0], [-10.0, 10.0]]).ravel()
        p = model.ModelParams(values, arch)
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        labels = np.array([0, 1, 1, 0])  # two of four match the argmax
        assert model.evaluate(p, feats, labels) == 0.5

    def test_empty_set_rejected(self):
        p = model.init_params([2, 2], seed=0)
        with pytest.raises(ValueError):
            model.evaluate(p, np.zeros((0, 2)), np.zeros(0, dtype=int))
