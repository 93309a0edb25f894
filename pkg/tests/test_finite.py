import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TANH1, ConstD2Loss
from mflab.core import ActivationSpec, DataModel, LossSpec, Sample, Schedule, ScheduleSpec, make_rng
from mflab.diagnostics import grad_check
from mflab.errors import ConfigurationError, NumericalOverflowError, StructuralError
from mflab.finite import (FiniteWeights, NetworkArch, backward_finite, batch_mean_dW, forward_finite,
                          full_batch_step, hidden_features, predict_finite, sgd_step, train_finite)


def random_net(rng, d, widths, scale=1.0):
    arch = NetworkArch(d, tuple(widths))
    return arch, FiniteWeights([scale * rng.standard_normal(s) for s in arch.weight_shapes()])


widths_st = st.lists(st.integers(1, 5), min_size=1, max_size=3).map(lambda w: tuple(w) + (1,))


class TestArch:
    def test_output_width_must_be_one(self):
        with pytest.raises(ConfigurationError):
            NetworkArch(2, (3, 2))

    def test_needs_two_layers(self):
        with pytest.raises(ConfigurationError):
            NetworkArch(2, (1,))

    def test_weight_shapes(self):
        assert NetworkArch(3, (4, 5, 1)).weight_shapes() == [(4, 3), (4, 5), (5, 1)]

    def test_shape_mismatch(self):
        arch = NetworkArch(2, (3, 1))
        with pytest.raises(StructuralError):
            forward_finite(arch, FiniteWeights([np.zeros((3, 2)), np.zeros((2, 1))]), [0.0, 0.0])
        with pytest.raises(StructuralError):
            forward_finite(arch, FiniteWeights.zeros(arch), [0.0, 0.0, 0.0])


class TestForward:
    def test_zero_weights(self):
        arch = NetworkArch(3, (4, 4, 1))
        yhat, H = forward_finite(arch, FiniteWeights.zeros(arch), [0.3, -1.0, 2.0])
        assert yhat == 0.0
        assert all(np.all(h == 0) for h in H)

    def test_hand_example(self, toy_l2):
        arch, w = toy_l2
        yhat, H = forward_finite(arch, w, [1.0])
        assert H[1][0] == pytest.approx(TANH1, abs=1e-15)
        assert yhat == pytest.approx(TANH1, abs=1e-15)
        np.testing.assert_allclose(H[0], [1.0, -1.0])

    @pytest.mark.parametrize("widths", [(1, 1, 1), (3, 7, 1), (5, 2, 1)])
    def test_identity_averaging(self, widths):
        ident = ActivationSpec("identity")
        arch = NetworkArch(1, widths, (ident, ident, ActivationSpec("identity", role="output")))
        w = FiniteWeights([np.ones(s) for s in arch.weight_shapes()])
        assert forward_finite(arch, w, [0.37])[0] == pytest.approx(0.37, abs=1e-15)

    def test_batch_matches_single(self):
        rng = make_rng(0)
        arch, w = random_net(rng, 3, (4, 6, 1))
        X = rng.standard_normal((9, 3))
        batch = predict_finite(arch, w, X)
        single = [forward_finite(arch, w, x)[0] for x in X]
        np.testing.assert_array_equal(batch, single)

    def test_hidden_features(self):
        rng = make_rng(1)
        arch, w = random_net(rng, 2, (4, 3, 1))
        X = rng.standard_normal((5, 2))
        F = hidden_features(arch, w, X)
        assert F.shape == (5, 3)
        _, H = forward_finite(arch, w, X[0])
        np.testing.assert_allclose(F[0], np.tanh(H[1]), atol=1e-15)
        with pytest.raises(StructuralError):
            hidden_features(arch, w, X, layer=3)

    @given(st.integers(0, 10_000), widths_st, st.integers(1, 3))
    def test_permutation_equivariance(self, seed, widths, d):
        rng = make_rng(seed)
        arch, w = random_net(rng, d, widths)
        if arch.L < 2:
            return
        x = rng.standard_normal(d)
        i = int(rng.integers(1, arch.L))  # permute hidden layer i
        perm = rng.permutation(widths[i - 1])
        layers = [a.copy() for a in w.layers]
        layers[i - 1] = layers[i - 1][perm] if i == 1 else layers[i - 1][:, perm]
        layers[i] = layers[i][perm]
        p = FiniteWeights(layers)
        y0, H0 = forward_finite(arch, w, x)
        y1, H1 = forward_finite(arch, p, x)
        assert y1 == pytest.approx(y0, abs=1e-12)
        np.testing.assert_allclose(H1[i - 1], H0[i - 1][perm], atol=1e-12)
        b0 = backward_finite(arch, w, Sample(x, 0.3), LossSpec())
        b1 = backward_finite(arch, p, Sample(x, 0.3), LossSpec())
        np.testing.assert_allclose(b1.dH[i - 1], b0.dH[i - 1][perm], atol=1e-12)

    @given(st.integers(0, 10_000), widths_st, st.integers(2, 3))
    def test_width_replication(self, seed, widths, r):
        """Repeating every neuron of a hidden layer r times leaves the function unchanged."""
        rng = make_rng(seed)
        arch, w = random_net(rng, 2, widths)
        x = rng.standard_normal(2)
        i = int(rng.integers(1, arch.L))
        layers = [a.copy() for a in w.layers]
        layers[i - 1] = np.repeat(layers[i - 1], r, axis=0 if i == 1 else 1)
        layers[i] = np.repeat(layers[i], r, axis=0)
        new_widths = list(widths)
        new_widths[i - 1] *= r
        big = NetworkArch(2, tuple(new_widths))
        assert forward_finite(big, FiniteWeights(layers), x)[0] == pytest.approx(
            forward_finite(arch, w, x)[0], abs=1e-12)


class TestBackward:
    def test_zero_seed(self):
        rng = make_rng(2)
        arch, w = random_net(rng, 2, (3, 4, 1))
        out = backward_finite(arch, w, Sample(np.ones(2), 0.0), ConstD2Loss(0.0))
        assert all(np.all(d == 0) for d in out.dH + out.dW)

    def test_hand_example(self, toy_l2):
        arch, w = toy_l2
        out = backward_finite(arch, w, Sample(np.array([1.0]), 0.0), ConstD2Loss(1.0))
        assert out.dW[1][0, 0] == pytest.approx(TANH1, abs=1e-15)
        assert out.dW[1][1, 0] == pytest.approx(-TANH1, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = make_rng(seed)
        arch, w = random_net(rng, int(rng.integers(1, 4)), tuple(int(n) for n in rng.integers(1, 7, 2)) + (1,))
        smp = Sample(rng.uniform(-1, 1, arch.d), float(rng.uniform(-1, 1)))
        assert grad_check(arch, w, smp, LossSpec("huber", 1.0)).worst <= 1e-5

    def test_batch_mean_matches_loop(self):
        rng = make_rng(3)
        arch, w = random_net(rng, 2, (3, 4, 1))
        data = DataModel.finite(rng.standard_normal((7, 2)), rng.standard_normal(7))
        mean = batch_mean_dW(arch, w, data, LossSpec())
        loop = [backward_finite(arch, w, Sample(x, y), LossSpec()).dW for x, y in zip(data.X, data.y)]
        for i, m in enumerate(mean):
            np.testing.assert_allclose(m, np.mean([l[i] for l in loop], axis=0), atol=1e-14)


class TestUpdates:
    def test_zero_schedule_keeps_weights(self):
        rng = make_rng(4)
        arch, w = random_net(rng, 2, (3, 1))
        out = sgd_step(arch, w, Sample(np.ones(2), 5.0), LossSpec(), ScheduleSpec.constant(2, 0.0), 0.7, 0)
        for a, b in zip(out.layers, w.layers):
            np.testing.assert_array_equal(a, b)

    def test_zero_derivative_keeps_weights(self):
        rng = make_rng(5)
        arch, w = random_net(rng, 2, (3, 1))
        out = sgd_step(arch, w, Sample(np.ones(2), 5.0), ConstD2Loss(0.0), ScheduleSpec.constant(2), 0.7, 3)
        for a, b in zip(out.layers, w.layers):
            np.testing.assert_array_equal(a, b)

    def test_hand_step(self, toy_l2):
        arch, w = toy_l2
        out = sgd_step(arch, w, Sample(np.array([1.0]), 0.0), ConstD2Loss(1.0), ScheduleSpec.constant(2), 0.1, 0)
        assert out.layers[1][0, 0] == pytest.approx(3 - 0.1 * TANH1, abs=1e-15)
        assert out.layers[1][0, 0] == pytest.approx(2.923841, abs=1e-6)

    def test_schedule_read_at_step_time(self):
        arch = NetworkArch(1, (1, 1))
        w = FiniteWeights([np.array([[0.5]]), np.array([[1.0]])])
        sch = ScheduleSpec((Schedule("constant", 0.0), Schedule("exponential-decay", 1.0, 1.0)))
        smp = Sample(np.array([1.0]), 0.0)
        out = sgd_step(arch, w, smp, ConstD2Loss(1.0), sch, 0.5, 4)
        step = 0.5 * np.exp(-2.0) * np.tanh(0.5)
        assert out.layers[1][0, 0] == pytest.approx(1.0 - step, abs=1e-15)

    def test_full_batch_step(self):
        rng = make_rng(6)
        arch, w = random_net(rng, 2, (3, 1))
        data = DataModel.finite(rng.standard_normal((4, 2)), rng.standard_normal(4))
        out = full_batch_step(arch, w, data, LossSpec(), ScheduleSpec.constant(2), 0.1, 0)
        g = batch_mean_dW(arch, w, data, LossSpec())
        for a, b, d in zip(out.layers, w.layers, g):
            np.testing.assert_allclose(a, b - 0.1 * d, atol=1e-15)

    def test_overflow_reports_step(self):
        arch = NetworkArch(1, (2, 1))
        w = FiniteWeights([np.ones((2, 1)), np.ones((2, 1))])
        data = DataModel.finite([[1.0]], [0.0])
        with pytest.raises(NumericalOverflowError) as info:
            train_finite(arch, w, data, ConstD2Loss(1.0), ScheduleSpec.constant(2, 1e300), 1e300, 10)
        assert info.value.step == 0


class TestTraining:
    def test_zero_steps(self):
        rng = make_rng(7)
        arch, w = random_net(rng, 2, (3, 1))
        out, traj = train_finite(arch, w, DataModel.teacher((1.0, 1.0)), LossSpec(), ScheduleSpec.constant(2), 0.1, 0)
        for a, b in zip(out.layers, w.layers):
            np.testing.assert_array_equal(a, b)
        assert traj.steps == [0]

    def test_bitwise_determinism(self):
        rng = make_rng(8)
        arch, w = random_net(rng, 2, (5, 4, 1))
        data = DataModel.teacher((3.0, -2.0))
        a, _ = train_finite(arch, w, data, LossSpec(), ScheduleSpec.constant(3), 0.05, 200, rng=11)
        b, _ = train_finite(arch, w, data, LossSpec(), ScheduleSpec.constant(3), 0.05, 200, rng=11)
        for x, y in zip(a.layers, b.layers):
            assert x.tobytes() == y.tobytes()

    def test_single_sample_loss_nonincreasing(self):
        rng = make_rng(9)
        arch, w = random_net(rng, 2, (4, 4, 1))
        x, y = np.array([0.3, -0.6]), 0.8
        data = DataModel.finite([x], [y])
        loss = LossSpec()
        _, traj = train_finite(arch, w, data, loss, ScheduleSpec.constant(3), 1e-3, 100)
        values = [float(loss.value(y, forward_finite(arch, s, x)[0])) for s in traj.snapshots]
        assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
        assert values[-1] < values[0]

    def test_logging_grid(self):
        rng = make_rng(10)
        arch, w = random_net(rng, 2, (3, 1))
        _, traj = train_finite(arch, w, DataModel.teacher((1.0, 0.0)), LossSpec(), ScheduleSpec.constant(2),
                               0.01, 25, log_every=10)
        assert traj.steps == [0, 10, 20, 25]
        assert traj.times == pytest.approx([0.0, 0.1, 0.2, 0.25])
