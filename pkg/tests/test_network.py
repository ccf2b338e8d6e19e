"""Dual-encoder network: layout, initialization, Jacobians, freezing."""
import numpy as np
import pytest

from cpdem.errors import ConfigError
from cpdem.network import (ModelArchitecture, ParameterVector, apply_freeze, default_architecture,
                           evaluate, forward, init_network, predict)
from cpdem.optim import AdamState, adam_step


def arch2d(**kw):
    return default_architecture(2, [(0, 3), (0, 1)], [(800, 1200), (0.25, 0.35)], **kw)


def set_layers(arch, layers):
    """Flat vector from a list of (W, b) pairs in layer order."""
    flat = np.concatenate([np.concatenate([np.ravel(W), b]) for W, b in layers])
    template = init_network(arch, 0)
    return ParameterVector(flat, template.shape_table, template.blocks)


class TestArchitecture:
    def test_manifold_input_width_mismatch(self):
        with pytest.raises(ConfigError, match="manifold input width"):
            ModelArchitecture((2, 20), (2, 10), (29, 2), [(0, 1)] * 2, [(0, 1)] * 2)

    def test_output_width_must_equal_dim(self):
        with pytest.raises(ConfigError, match="output width"):
            ModelArchitecture((2, 20), (2, 10), (30, 3), [(0, 1)] * 2, [(0, 1)] * 2)

    def test_param_latent_must_exceed_param_count(self):
        with pytest.raises(ConfigError, match="latent"):
            ModelArchitecture((2, 20), (2, 2), (22, 2), [(0, 1)] * 2, [(0, 1)] * 2)

    def test_record_round_trip(self):
        a = arch2d(activation="relu", output_scale=0.1)
        assert ModelArchitecture.from_record(a.to_record()) == a


class TestInit:
    def test_layer_count_for_two_twenty_twenty_two(self):
        """[2, 20, 20, 2] path: 2*20+20 + 20*20+20 + 20*2+2 entries."""
        a = ModelArchitecture((2, 20, 20), (2, 10), (30, 20, 2), [(0, 1)] * 2, [(0, 1)] * 2)
        p = init_network(a, 0)
        sizes = [r * c + r for r, c in p.shape_table]
        assert sizes[0] + sizes[1] == 2 * 20 + 20 + 20 * 20 + 20
        assert sum(r * c + r for r, c in [(20, 2), (20, 20), (2, 20)]) == 522
        assert len(p.flat) == sum(sizes)

    def test_deterministic(self):
        a = arch2d()
        np.testing.assert_array_equal(init_network(a, 7).flat, init_network(a, 7).flat)
        assert not np.array_equal(init_network(a, 7).flat, init_network(a, 8).flat)

    def test_zero_biases_and_glorot_bound(self):
        a = arch2d()
        p = init_network(a, 3)
        start = 0
        for rows, cols in p.shape_table:
            W = p.flat[start:start + rows * cols]
            b = p.flat[start + rows * cols:start + rows * cols + rows]
            assert np.all(b == 0.0)
            assert np.max(np.abs(W)) <= np.sqrt(6.0 / (rows + cols))
            start += rows * cols + rows


class TestForward:
    def test_zero_params_give_zero_output_and_jacobian(self):
        a = arch2d()
        p = init_network(a, 0).with_flat(np.zeros(len(init_network(a, 0).flat)))
        out = forward(p, a, [1.0, 0.5], [1000.0, 0.3])
        np.testing.assert_array_equal(out.u, 0.0)
        np.testing.assert_array_equal(out.coord_jacobian, 0.0)

    def test_linear_path_jacobian_is_W(self):
        """relu(x) - relu(-x) = x turns the net into u = W x on the box [-1, 1]^2."""
        a = ModelArchitecture((2, 4), (1, 2), (6, 2), [(-1, 1), (-1, 1)], [(0, 1)],
                              activation="relu")
        W = np.array([[1.5, -0.25], [0.75, 2.0]])
        p = set_layers(a, [
            (np.vstack([np.eye(2), -np.eye(2)]), np.zeros(4)),
            (np.zeros((2, 1)), np.zeros(2)),
            (np.hstack([W, -W, np.zeros((2, 2))]), np.zeros(2)),
        ])
        X = np.array([0.3, -0.6])
        out = forward(p, a, X, [0.5])
        np.testing.assert_array_equal(out.coord_jacobian, W)
        np.testing.assert_allclose(out.u, W @ X, rtol=1e-15)

    def test_jacobian_matches_finite_differences(self):
        a = arch2d()
        p = init_network(a, 11)
        X = np.array([1.3, 0.4])
        eta = [950.0, 0.3]
        J = forward(p, a, X, eta).coord_jacobian
        h = 1e-6
        fd = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[:, j] = (forward(p, a, X + e, eta).u - forward(p, a, X - e, eta).u) / (2 * h)
        np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-9)

    def test_stateless_call_order(self):
        a = arch2d()
        p = init_network(a, 1)
        X1, X2, eta = [0.5, 0.5], [2.5, 0.1], [1100.0, 0.27]
        first = (forward(p, a, X1, eta).u, forward(p, a, X2, eta).u)
        second = (forward(p, a, X2, eta).u, forward(p, a, X1, eta).u)
        np.testing.assert_array_equal(first[0], second[1])
        np.testing.assert_array_equal(first[1], second[0])

    def test_batched_rows_are_sample_major(self):
        a = arch2d()
        p = init_network(a, 2)
        X = np.array([[0.0, 0.0], [1.0, 0.5], [3.0, 1.0]])
        etas = np.array([[800.0, 0.25], [1200.0, 0.35]])
        z = np.asarray(evaluate(p.flat, a, X, etas).value)
        for s in range(2):
            np.testing.assert_allclose(z[s * 3:(s + 1) * 3], predict(p, a, X, etas[s]), rtol=1e-14)

    def test_continuity_under_refinement(self):
        a = arch2d()
        p = init_network(a, 5)
        X = np.array([1.0, 0.5])
        eta = [1000.0, 0.3]
        jumps = [np.max(np.abs(forward(p, a, X + d, eta).u - forward(p, a, X, eta).u))
                 for d in (1e-2, 1e-4, 1e-6)]
        assert jumps[0] > jumps[1] > jumps[2]
        assert jumps[2] < 1e-5

    def test_relu_network_reproduces_piecewise_linear_interpolant(self):
        """u0 + sum w_i relu(x - x_i) with knots as biases, checked at 1000 points."""
        knots = np.array([-0.8, -0.3, 0.1, 0.6])
        w = np.array([1.0, -2.0, 0.5, 3.0])
        u0 = 0.25
        K = len(knots)
        a = ModelArchitecture((1, K), (1, 2), (K + 2, 1), [(-1, 1)], [(0, 1)], activation="relu")
        p = set_layers(a, [
            (np.ones((K, 1)), -knots),
            (np.zeros((2, 1)), np.zeros(2)),
            (np.concatenate([w, [0.0, 0.0]])[None, :], np.array([u0])),
        ])
        x = np.linspace(-1, 1, 1000)
        expected = u0 + np.maximum(x[:, None] - knots[None, :], 0.0) @ w
        got = predict(p, a, x[:, None], [0.5])[:, 0]
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-14)


class TestFreeze:
    def test_none_clears_mask(self):
        p = apply_freeze(apply_freeze(init_network(arch2d(), 0), "freeze_encoders"), "none")
        assert not p.freeze_mask.any()

    def test_encoder_count(self):
        a = arch2d()
        p = apply_freeze(init_network(a, 0), "freeze_encoders")
        n_enc = sum(r * c + r for (blk, r, c) in a.layers() if blk != "manifold")
        assert int(p.freeze_mask.sum()) == n_enc
        assert not p.freeze_mask[p.block_mask("manifold")].any()

    def test_optimizer_step_keeps_encoders_bitwise(self):
        p = apply_freeze(init_network(arch2d(), 0), "freeze_encoders")
        state = AdamState.zeros(len(p.flat), lr=0.5)
        g = np.random.default_rng(0).normal(size=len(p.flat))
        theta, _ = adam_step(state, p.flat, g, p.freeze_mask)
        np.testing.assert_array_equal(theta[p.freeze_mask], p.flat[p.freeze_mask])
        assert np.all(theta[~p.freeze_mask] != p.flat[~p.freeze_mask])

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            apply_freeze(init_network(arch2d(), 0), "freeze_all")
