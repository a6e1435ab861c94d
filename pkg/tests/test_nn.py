"""Tests for the MLP, backpropagation, the optimizer and checkpoints."""

import json
import math

import numpy as np
import pytest

from vblab.errors import ContractError, DivergenceError, ParameterError
from vblab.losses import LossSpec, batch_loss_grads, batch_loss_values
from vblab.nn import (
    CHECKPOINT_MAGIC,
    MlpModel,
    OptimizerState,
    Schedule,
    backward,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    softmax,
)

GRADIENT_SPECS = [
    LossSpec.ce(), LossSpec.mae(), LossSpec.el(), LossSpec.vce(2.0),
    LossSpec.vel(1.5), LossSpec.vsl(0.3), LossSpec.nce(),
    LossSpec.combined(LossSpec.vce(4.0), 1.0, 10.0),
]


@pytest.fixture
def small_model():
    return MlpModel.initialize([3, 5, 4], seed=2)


@pytest.fixture
def batch():
    rng = np.random.default_rng(7)
    return rng.standard_normal((6, 3)), rng.integers(0, 4, size=6)


def mean_loss(model, spec, x, y):
    return float(batch_loss_values(spec, forward(model, x)[1], y).mean())


class TestSoftmax:
    """Tests for the numerically stable softmax."""

    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros((2, 4))), 0.25)

    def test_large_logits(self):
        probs = softmax(np.array([[1000.0, 0.0]]))
        np.testing.assert_allclose(probs, [[1.0, 0.0]], atol=1e-12)

    def test_extreme_magnitudes_stay_finite(self):
        probs = softmax(np.array([[1e4, -1e4, 0.0]]))
        assert np.all(np.isfinite(probs))
        assert probs.sum() == pytest.approx(1.0)


class TestMlpModel:
    """Tests for construction and the forward pass."""

    def test_shapes(self, small_model, batch):
        logits, probs = small_model.forward(batch[0])
        assert logits.shape == probs.shape == (6, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_initialization_deterministic(self):
        a = MlpModel.initialize([4, 8, 3], seed=1)
        b = MlpModel.initialize([4, 8, 3], seed=1)
        for p, q in zip(a.parameters, b.parameters):
            np.testing.assert_array_equal(p, q)
        np.testing.assert_array_equal(a.biases[0], 0.0)

    def test_rejects_bad_dims(self):
        with pytest.raises(ContractError):
            MlpModel.initialize([4, 1], seed=0)
        with pytest.raises(ContractError):
            MlpModel([2, 2], [np.zeros((3, 2))], [np.zeros(2)])

    def test_rejects_bad_batch(self, small_model):
        with pytest.raises(ContractError, match='width'):
            small_model.forward(np.zeros((2, 5)))


class TestBackward:
    """Backpropagation against central finite differences."""

    @pytest.mark.parametrize('spec', GRADIENT_SPECS, ids=lambda s: s.label)
    def test_finite_differences(self, small_model, batch, spec):
        x, y = batch
        probs = forward(small_model, x)[1]
        grads = backward(small_model, x, batch_loss_grads(spec, probs, y))
        h = 1e-6
        for param, grad in zip(small_model.parameters, grads):
            assert grad.shape == param.shape
            numeric = np.zeros_like(param)
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + h
                upper = mean_loss(small_model, spec, x, y)
                param[idx] = original - h
                lower = mean_loss(small_model, spec, x, y)
                param[idx] = original
                numeric[idx] = (upper - lower) / (2 * h)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)

    def test_zero_upstream_gradient(self, small_model, batch):
        grads = backward(small_model, batch[0], np.zeros((6, 4)))
        for g in grads:
            np.testing.assert_array_equal(g, 0.0)

    def test_cross_entropy_identity(self, batch):
        """For CE the logit gradient is (u - onehot(y)) / N."""
        x, y = batch
        model = MlpModel.initialize([3, 4], seed=5)
        probs = forward(model, x)[1]
        grads = backward(model, x, batch_loss_grads(LossSpec.ce(), probs, y))
        expected = (probs - np.eye(4)[y]).mean(axis=0)
        np.testing.assert_allclose(grads[1], expected, atol=1e-12)

    def test_shape_mismatch(self, small_model, batch):
        with pytest.raises(ContractError):
            backward(small_model, batch[0], np.zeros((6, 3)))


class TestOptimizer:
    """Tests for SGD with momentum, L1 decay and schedules."""

    def test_plain_gradient_step(self):
        model = MlpModel([2, 2], [np.ones((2, 2))], [np.zeros(2)])
        opt = OptimizerState.for_model(model, lr0=0.1, momentum=0.0,
                                       schedule=Schedule.CONSTANT, total_epochs=1)
        grads = [np.full((2, 2), 2.0), np.array([1.0, -1.0])]
        sgd_step(model, grads, opt, epoch=0)
        np.testing.assert_allclose(model.weights[0], 0.8)
        np.testing.assert_allclose(model.biases[0], [-0.1, 0.1])

    def test_momentum_accumulates(self):
        model = MlpModel([2, 2], [np.zeros((2, 2))], [np.zeros(2)])
        opt = OptimizerState.for_model(model, lr0=1.0, momentum=0.5,
                                       schedule='constant', total_epochs=2)
        grads = [np.ones((2, 2)), np.ones(2)]
        sgd_step(model, grads, opt, epoch=0)
        sgd_step(model, grads, opt, epoch=1)
        # v1 = 1, v2 = 1.5
        np.testing.assert_allclose(model.biases[0], -2.5)

    def test_l1_decay_enters_velocity(self):
        model = MlpModel([2, 2], [np.full((2, 2), 3.0)], [np.full(2, -3.0)])
        opt = OptimizerState.for_model(model, lr0=1.0, momentum=0.0, l1_decay=0.5,
                                       schedule='constant')
        sgd_step(model, [np.zeros((2, 2)), np.zeros(2)], opt, epoch=0)
        np.testing.assert_allclose(model.weights[0], 2.5)
        np.testing.assert_allclose(model.biases[0], -2.5)

    def test_cosine_schedule(self):
        opt = OptimizerState(lr0=0.2, schedule=Schedule.COSINE, total_epochs=10)
        assert opt.learning_rate(0) == pytest.approx(0.2)
        assert opt.learning_rate(5) == pytest.approx(0.1)
        assert opt.learning_rate(10) == pytest.approx(0.0, abs=1e-15)

    def test_exponential_schedule(self):
        opt = OptimizerState(lr0=0.1, schedule='exponential', total_epochs=10)
        assert opt.learning_rate(3) == pytest.approx(0.1 * 0.97 ** 3)

    def test_constant_schedule(self):
        opt = OptimizerState(lr0=0.05, schedule='constant', total_epochs=4)
        assert opt.learning_rate(3) == 0.05

    def test_nan_gradient_diverges(self, small_model):
        opt = OptimizerState.for_model(small_model, lr0=0.1)
        grads = [np.zeros_like(p) for p in small_model.parameters]
        grads[0][0, 0] = math.nan
        with pytest.raises(DivergenceError):
            sgd_step(small_model, grads, opt, epoch=0)

    def test_overflowing_parameters_diverge(self):
        model = MlpModel([2, 2], [np.zeros((2, 2))], [np.zeros(2)])
        opt = OptimizerState.for_model(model, lr0=1e300, momentum=0.0,
                                       schedule='constant')
        with pytest.raises(DivergenceError):
            sgd_step(model, [np.full((2, 2), 1e300), np.zeros(2)], opt, epoch=0)

    def test_divergence_leaves_model_untouched(self):
        """An update that overflows in a later layer changes nothing."""
        model = MlpModel([2, 3, 2], [np.ones((2, 3)), np.ones((3, 2))],
                         [np.zeros(3), np.zeros(2)])
        opt = OptimizerState.for_model(model, lr0=1e300, momentum=0.5,
                                       schedule='constant')
        opt.velocity[0][...] = 0.25
        grads = [np.full((2, 3), 1e-300), np.zeros(3),
                 np.full((3, 2), 1e300), np.zeros(2)]
        with pytest.raises(DivergenceError):
            sgd_step(model, grads, opt, epoch=0)
        np.testing.assert_array_equal(model.weights[0], 1.0)
        np.testing.assert_array_equal(model.weights[1], 1.0)
        np.testing.assert_array_equal(opt.velocity[0], 0.25)
        np.testing.assert_array_equal(opt.velocity[2], 0.0)

    def test_heavy_ball_on_quadratic_bowl(self):
        """On f = |theta|^2 / 2 the step follows the scalar heavy-ball recurrence."""
        start = np.array([[1.0, -2.0], [0.5, 3.0]])
        model = MlpModel([2, 2], [start.copy()], [np.array([1.0, -1.0])])
        opt = OptimizerState.for_model(model, lr0=0.1, momentum=0.9,
                                       schedule='constant', total_epochs=300)
        p, v = start.copy(), np.zeros_like(start)
        for epoch in range(300):
            sgd_step(model, [w.copy() for w in model.parameters], opt, epoch)
            v = 0.9 * v + p
            p = p - 0.1 * v
            if epoch == 9:
                np.testing.assert_allclose(model.weights[0], p, rtol=1e-12)
        np.testing.assert_allclose(model.weights[0], p, rtol=1e-9, atol=1e-15)
        assert np.abs(model.weights[0]).max() < 1e-5
        assert np.abs(model.biases[0]).max() < 1e-5

    def test_epoch_range(self, small_model):
        opt = OptimizerState.for_model(small_model, lr0=0.1, total_epochs=3)
        grads = [np.zeros_like(p) for p in small_model.parameters]
        with pytest.raises(ParameterError, match='epoch'):
            sgd_step(small_model, grads, opt, epoch=3)

    @pytest.mark.parametrize('kwargs', [
        {'lr0': -1.0}, {'lr0': 0.1, 'momentum': 1.0}, {'lr0': 0.1, 'l1_decay': -1.0},
        {'lr0': 0.1, 'total_epochs': 0},
    ])
    def test_invalid_hyperparameters(self, kwargs):
        with pytest.raises(ParameterError):
            OptimizerState(**kwargs)

    def test_descends_on_blobs(self):
        """A few full-batch steps lower the CE loss."""
        rng = np.random.default_rng(0)
        y = np.repeat([0, 1], 20)
        x = rng.standard_normal((40, 2)) + np.where(y[:, None] == 0, -2.0, 2.0)
        model = MlpModel.initialize([2, 8, 2], seed=0)
        opt = OptimizerState.for_model(model, lr0=0.1, schedule='constant',
                                       total_epochs=20)
        before = mean_loss(model, LossSpec.ce(), x, y)
        for epoch in range(20):
            probs = forward(model, x)[1]
            grads = backward(model, x, batch_loss_grads(LossSpec.ce(), probs, y))
            sgd_step(model, grads, opt, epoch)
        assert mean_loss(model, LossSpec.ce(), x, y) < before


class TestCheckpoints:
    """Tests for JSON checkpoints."""

    def test_round_trip(self, small_model, tmp_path):
        path = save_checkpoint(small_model, tmp_path / 'model.json')
        loaded = load_checkpoint(path)
        assert loaded.layer_dims == small_model.layer_dims
        for p, q in zip(loaded.parameters, small_model.parameters):
            np.testing.assert_array_equal(p, q)
        assert json.loads(path.read_text())['magic'] == CHECKPOINT_MAGIC

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'model.json'
        path.write_text(json.dumps({'magic': 'OTHER', 'layer_dims': [2, 2]}))
        with pytest.raises(ContractError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / 'nope.json')

    def test_build_model_from_checkpoint(self, small_model, tmp_path):
        path = save_checkpoint(small_model, tmp_path / 'model.json')
        model = build_model(3, [5], 4, seed=99, checkpoint=path)
        np.testing.assert_array_equal(model.weights[0], small_model.weights[0])
        with pytest.raises(ContractError, match='do not match'):
            build_model(3, [6], 4, seed=0, checkpoint=path)
