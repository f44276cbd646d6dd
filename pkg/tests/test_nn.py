import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tlleak.nn import (
    PROB_EPS,
    Gradients,
    Mlp,
    MlpSpec,
    ShapeError,
    backward,
    bce_loss,
    dumps_mlp,
    forward,
    grad_check,
    loads_mlp,
    loss_and_grads,
    mlp_init,
    per_example_backward,
)


def _zero_net(spec):
    return Mlp(spec, tuple(np.zeros_like(p) for p in mlp_init(spec, 0).params))


specs = st.builds(
    MlpSpec,
    input_dim=st.integers(1, 6),
    hidden_dims=st.lists(st.integers(1, 6), min_size=1, max_size=3).map(tuple),
)


class TestSpec:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(input_dim=0, hidden_dims=(2,)),
            dict(input_dim=3, hidden_dims=()),
            dict(input_dim=3, hidden_dims=(2, 0)),
            dict(input_dim=3, hidden_dims=(2,), dropout_rate=1.0),
            dict(input_dim=3, hidden_dims=(2,), dropout_rate=-0.1),
            dict(input_dim=3, hidden_dims=(2,), activation="tanh"),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MlpSpec(**kw)

    def test_params_must_chain(self):
        spec = MlpSpec(4, (2,))
        good = mlp_init(spec, 0).params
        with pytest.raises(ShapeError):
            Mlp(spec, (good[0], good[1], np.zeros((1, 3)), good[3]))

    def test_params_must_be_finite(self):
        spec = MlpSpec(4, (2,))
        params = list(mlp_init(spec, 0).params)
        params[0] = params[0].copy()
        params[0][0, 0] = np.nan
        with pytest.raises(ValueError):
            Mlp(spec, tuple(params))


class TestInit:
    def test_shapes(self):
        mlp = mlp_init(MlpSpec(4, (2,)), 7)
        assert [p.shape for p in mlp.params] == [(2, 4), (2,), (1, 2), (1,)]

    def test_deterministic(self):
        spec = MlpSpec(4, (2,))
        a, b = mlp_init(spec, 7), mlp_init(spec, 7)
        assert dumps_mlp(a) == dumps_mlp(b)

    def test_seed_changes_params(self):
        spec = MlpSpec(4, (2,))
        assert dumps_mlp(mlp_init(spec, 7)) != dumps_mlp(mlp_init(spec, 8))

    def test_glorot_range_and_zero_bias(self):
        spec = MlpSpec(30, (64, 8))
        mlp = mlp_init(spec, 1)
        for (fan_in, fan_out), (W, b) in zip(spec.layer_dims, mlp.layers):
            assert np.abs(W).max() <= math.sqrt(6 / (fan_in + fan_out))
            assert not b.any()


class TestForward:
    def test_zero_weights_half(self):
        mlp = _zero_net(MlpSpec(5, (3, 2)))
        X = np.random.default_rng(0).normal(size=(10, 5))
        np.testing.assert_array_equal(forward(mlp, X).probs, 0.5)

    def test_no_dropout_train_equals_eval(self):
        mlp = mlp_init(MlpSpec(5, (4, 3)), 0)
        X = np.random.default_rng(1).normal(size=(8, 5))
        a, b = forward(mlp, X), forward(mlp, X, train_seed=3)
        for h, g in zip(a.hidden, b.hidden):
            np.testing.assert_array_equal(h, g)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_shape_error(self):
        mlp = mlp_init(MlpSpec(5, (4,)), 0)
        with pytest.raises(ShapeError, match="5"):
            forward(mlp, np.zeros((3, 4)))

    def test_activation_shapes(self):
        spec = MlpSpec(5, (4, 3))
        acts = forward(mlp_init(spec, 0), np.ones((6, 5)))
        assert [h.shape for h in acts.hidden] == [(6, 4), (6, 3)]
        assert acts.probs.shape == (6,)

    def test_dropout_scaling(self):
        spec = MlpSpec(5, (50,), dropout_rate=0.5)
        mlp = mlp_init(spec, 0)
        X = np.random.default_rng(0).normal(size=(4, 5))
        ev, tr = forward(mlp, X), forward(mlp, X, train_seed=11)
        kept = tr.masks[0] > 0
        np.testing.assert_allclose(tr.hidden[0][kept], 2 * ev.hidden[0][kept])
        assert not tr.hidden[0][~kept].any()

    def test_dropout_unbiased(self):
        spec = MlpSpec(5, (6,), dropout_rate=0.5)
        mlp = mlp_init(spec, 2)
        x = np.abs(np.random.default_rng(0).normal(size=(1, 5))) + 0.5
        ev = forward(mlp, x).hidden[0][0]
        mean = np.mean([forward(mlp, x, train_seed=s).hidden[0][0] for s in range(10_000)], axis=0)
        active = ev > 1e-3
        assert active.any()
        np.testing.assert_allclose(mean[active], ev[active], rtol=0.05)

    def test_forward_deterministic(self):
        mlp = mlp_init(MlpSpec(5, (4, 3), dropout_rate=0.3), 0)
        X = np.random.default_rng(0).normal(size=(8, 5))
        a, b = forward(mlp, X, train_seed=5), forward(mlp, X, train_seed=5)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_probs_clamped(self):
        spec = MlpSpec(1, (1,))
        mlp = Mlp(spec, (np.array([[1.0]]), np.zeros(1), np.array([[1e4]]), np.zeros(1)))
        p = forward(mlp, np.array([[1.0], [-1.0]])).probs
        assert p[0] == 1 - PROB_EPS and 0 < p[1] < 1
        loss, dp = bce_loss(p, np.array([0, 1]))
        assert np.isfinite(loss) and np.all(np.isfinite(dp))


class TestLoss:
    def test_half(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1]))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    @given(st.floats(0.01, 0.99), st.integers(1, 5))
    def test_positive_gradient(self, p, n):
        _, g = bce_loss(np.full(n, p), np.ones(n, dtype=int))
        np.testing.assert_allclose(g, -1 / p / n, rtol=1e-12)

    def test_brute_force_sum(self):
        rng = np.random.default_rng(3)
        p, y = rng.uniform(0.01, 0.99, 32), rng.integers(0, 2, 32)
        brute = sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)) / 32
        assert bce_loss(p, y)[0] == pytest.approx(brute, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.array([0.5, 0.5]), np.array([1]))


class TestBackward:
    def test_zero_upstream(self):
        mlp = mlp_init(MlpSpec(4, (3,)), 0)
        acts = forward(mlp, np.ones((2, 4)))
        assert all(not g.any() for g in backward(mlp, acts, np.zeros(2)).params)

    def test_output_layer_is_logistic_gradient(self):
        mlp = mlp_init(MlpSpec(4, (3,)), 1)
        x, y = np.array([[0.3, -1.2, 0.8, 2.0]]), np.array([1])
        acts = forward(mlp, x)
        g = backward(mlp, acts, bce_loss(acts.probs, y)[1])
        p = acts.probs[0]
        np.testing.assert_allclose(g.params[2][0], (p - 1) * acts.hidden[0][0], rtol=1e-10)
        np.testing.assert_allclose(g.params[3], [p - 1], rtol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(specs, st.integers(0, 2**31 - 1))
    def test_finite_difference(self, spec, seed):
        # generic parameters: zero biases can park a unit exactly on the ReLU kink
        rng = np.random.default_rng(seed)
        base = mlp_init(spec, seed)
        mlp = base.replace([p + rng.normal(0, 0.1, p.shape) for p in base.params])
        X = rng.normal(size=(5, spec.input_dim))
        y = rng.integers(0, 2, size=5)
        # central differences are meaningless when a step straddles a kink
        assume(all(np.abs(z).min() > 1e-3 for z in forward(mlp, X).pre[:-1]))
        assert grad_check(mlp, X, y, eps=1e-5) < 1e-4

    def test_finite_difference_with_dropout_masks(self):
        spec = MlpSpec(6, (8, 4), dropout_rate=0.4)
        mlp = mlp_init(spec, 4)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(9, 6)), rng.integers(0, 2, size=9)
        assert grad_check(mlp, X, y, train_seed=17) < 1e-4

    def test_experiment_architecture(self):
        mlp = mlp_init(MlpSpec(20, (64, 8)), 0)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(16, 20)), rng.integers(0, 2, size=16)
        assert grad_check(mlp, X, y) < 1e-4

    def test_zero_net_zero_input(self):
        mlp = _zero_net(MlpSpec(3, (2,)))
        assert grad_check(mlp, np.zeros((2, 3)), np.array([0, 1])) == 0.0

    def test_corrupted_gradient_detected(self):
        mlp = mlp_init(MlpSpec(4, (3,)), 0)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(6, 4)), rng.integers(0, 2, size=6)
        _, g = loss_and_grads(mlp, X, y)
        bad = [p.copy() for p in g.params]
        bad[0][0, 0] += 0.1
        assert grad_check(mlp, X, y, analytic=Gradients(tuple(bad))) > 1e-2

    def test_eps_range(self):
        mlp = mlp_init(MlpSpec(2, (2,)), 0)
        with pytest.raises(ValueError):
            grad_check(mlp, np.ones((1, 2)), np.array([1]), eps=1e-2)

    def test_per_example_sums_to_batch(self):
        mlp = mlp_init(MlpSpec(5, (4, 3), dropout_rate=0.2), 0)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(7, 5)), rng.integers(0, 2, size=7)
        acts = forward(mlp, X, train_seed=2)
        dp = bce_loss(acts.probs, y)[1]
        batch = backward(mlp, acts, dp)
        for g, stacked in zip(batch.params, per_example_backward(mlp, acts, dp)):
            np.testing.assert_allclose(stacked.sum(axis=0), g, atol=1e-14)

    def test_hidden_gradient_injection(self):
        # an extra upstream gradient on the last hidden layer must match d/dh of <c, h>
        mlp = mlp_init(MlpSpec(3, (4, 2)), 5)
        X = np.random.default_rng(0).normal(size=(3, 3))
        c = np.random.default_rng(1).normal(size=(3, 2))
        acts = forward(mlp, X)
        g = backward(mlp, acts, np.zeros(3), hidden_grads={-1: c}).flat()
        theta, eps = mlp.flat(), 1e-6
        for j in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[j] += eps
            down[j] -= eps
            f = lambda t: float(np.sum(c * forward(mlp.from_flat(t), X).hidden[-1]))  # noqa: E731
            assert g[j] == pytest.approx((f(up) - f(down)) / (2 * eps), abs=1e-7)


class TestSerialization:
    @settings(max_examples=20, deadline=None)
    @given(specs, st.integers(0, 2**31 - 1))
    def test_round_trip_bitwise(self, spec, seed):
        mlp = mlp_init(spec, seed)
        back = loads_mlp(dumps_mlp(mlp))
        assert back.spec == mlp.spec
        assert all(np.array_equal(a, b) for a, b in zip(mlp.params, back.params))

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            loads_mlp("something else\n")
