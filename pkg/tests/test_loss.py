"""Potential energy assembly, its expectation, and material sampling."""
import math
from dataclasses import replace

import numpy as np
import pytest

from cpdem.autodiff import tape_gradient
from cpdem.constitutive import EnergyModel
from cpdem.domain import DirichletAnsatz, build_grid
from cpdem.errors import ConfigError, InvertedElementError
from cpdem.loss import (ExpectedEnergy, ParameterDistribution, PointObjective, Problem,
                        expected_potential, potential_energy, sample_parameters)
from cpdem.network import ModelArchitecture, default_architecture, init_network
from cpdem.optim import TrainSchedule, train
from cpdem.oracle import bar_analytic

BAR_BOX = [(0.5, 3.0)]


def bar_problem(kind="linear_elastic", n=101, arch=None):
    arch = arch or default_architecture(1, [(0, 1)], BAR_BOX)
    model = EnergyModel(kind, 1, ("E",), {"nu": 0.0}, body_force=lambda X: X)
    return Problem(arch, build_grid(1, [(0, 1)], n), DirichletAnsatz("multiply_by_X"), model)


def beam_problem(kind="linear_elastic", traction=(0.0, -5.0), output_scale=1.0):
    arch = default_architecture(2, [(0, 3), (0, 1)], [(100, 500), (0.25, 0.35)],
                                output_scale=output_scale)
    dom = build_grid(2, [(0, 3), (0, 1)], (16, 6))
    dom.add_traction("x1_max", traction)
    return Problem(arch, dom, DirichletAnsatz("multiply_by_x1"), EnergyModel(kind, 2))


class TestPotentialEnergy:
    def test_zero_field_zero_load(self):
        prob = beam_problem(traction=(0.0, 0.0))
        flat = np.zeros(len(init_network(prob.arch, 0).flat))
        assert potential_energy(flat, prob.arch, prob.domain, prob.ansatz, prob.model,
                                [300.0, 0.3]) == 0.0

    def test_exact_bar_solution_is_minimal(self):
        """The analytic field has lower discrete energy than 20 perturbed fields."""
        prob = bar_problem()
        X = prob.domain.points[:, 0]
        u = bar_analytic(X, 1.0)
        du = 0.5 - X ** 2 / 2
        U0, W0 = prob.field_energy(u[:, None], du[:, None, None], [1.0])
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=4) * 0.05
            k = np.arange(1, 5)
            delta = X * (np.sin(np.outer(X, k) * np.pi) @ a)
            ddelta = np.sin(np.outer(X, k) * np.pi) @ a + X * (np.cos(np.outer(X, k) * np.pi) @ (a * k * np.pi))
            U, W = prob.field_energy((u + delta)[:, None], (du + ddelta)[:, None, None], [1.0])
            assert U - W > U0 - W0

    def test_scaling_splits_quadratic_and_linear(self):
        prob = beam_problem()
        prob2 = beam_problem(output_scale=2.0)
        flat = init_network(prob.arch, 4).flat
        t1 = prob.terms(flat, [[300.0, 0.3]])
        t2 = prob2.terms(flat, [[300.0, 0.3]])
        assert t2.internal[0] == pytest.approx(4 * t1.internal[0], rel=1e-13)
        assert t2.external[0] == pytest.approx(2 * t1.external[0], rel=1e-13)

    def test_doubling_E_doubles_internal_only(self):
        """Same field under both moduli; the network itself sees E, so the field is fixed here."""
        prob = beam_problem()
        X = prob.domain.points
        u = np.column_stack([1e-3 * X[:, 0] * X[:, 1], -2e-3 * X[:, 0] ** 2])
        g = np.zeros((len(X), 2, 2))
        g[:, 0, 0], g[:, 0, 1] = 1e-3 * X[:, 1], 1e-3 * X[:, 0]
        g[:, 1, 0] = -4e-3 * X[:, 0]
        U1, W1 = prob.field_energy(u, g, [200.0, 0.3])
        U2, W2 = prob.field_energy(u, g, [400.0, 0.3])
        assert U2 == pytest.approx(2 * U1, rel=1e-14)
        assert W2 == W1

    def test_point_order_invariance(self):
        prob = beam_problem()
        flat = init_network(prob.arch, 2).flat
        perm = np.random.default_rng(1).permutation(prob.domain.n_points)
        dom = replace(prob.domain, points=prob.domain.points[perm], weights=prob.domain.weights[perm])
        seg = dom.face_segment("x1_max", (0.0, -5.0))
        dom.neumann_segments = [seg]
        shuffled = Problem(prob.arch, dom, prob.ansatz, prob.model)
        a = prob.terms(flat, [[300.0, 0.3]]).per_sample[0]
        b = shuffled.terms(flat, [[300.0, 0.3]]).per_sample[0]
        assert a == b

    def test_inverted_element_carries_point_and_eta(self):
        prob = beam_problem(kind="neo_hookean", output_scale=50.0)
        flat = init_network(prob.arch, 0).flat
        with pytest.raises(InvertedElementError) as info:
            prob.terms(flat, [[100.0, 0.3]])
        assert info.value.point is not None
        np.testing.assert_array_equal(info.value.eta, [100.0, 0.3])

    def test_boundary_diagnostic_zero_on_clamp(self):
        prob = beam_problem()
        assert prob.terms(init_network(prob.arch, 0).flat, [[300.0, 0.3]]).boundary_diag == 0.0


class TestExpectedPotential:
    def test_point_mass_equals_single_sample(self):
        prob = bar_problem()
        params = init_network(prob.arch, 0)
        dist = ParameterDistribution("uniform_box", (1.7,), (1.7,))
        args = (params, prob.arch, prob.domain, prob.ansatz, prob.model)
        assert expected_potential(*args, dist, 5) == pytest.approx(potential_energy(*args, [1.7]), rel=1e-15)

    def test_two_samples_mean(self):
        prob = bar_problem()
        params = init_network(prob.arch, 0)
        dist = ParameterDistribution("uniform_box", (0.5,), (3.0,), seed=3)
        args = (params, prob.arch, prob.domain, prob.ansatz, prob.model)
        etas = sample_parameters(dist, 2, epoch=0)
        mean = math.fsum(potential_energy(*args, e) for e in etas) / 2
        assert expected_potential(*args, dist, 2, epoch=0) == pytest.approx(mean, rel=1e-14)

    def test_trained_bar_obeys_clapeyron(self):
        """At equilibrium U = W / 2, so the expected potential is negative."""
        prob = bar_problem()
        dist = ParameterDistribution("uniform_box", (0.5,), (3.0,), seed=0)
        obj = ExpectedEnergy(prob, dist, n_samples=16)
        params, _ = train(init_network(prob.arch, 0), TrainSchedule(300, 10, lr=1e-2), obj)
        etas = sample_parameters(dist, 8, epoch=12345)
        t = prob.terms(params.flat, etas)
        assert np.all(t.per_sample < 0)
        np.testing.assert_allclose(t.internal, t.external / 2, rtol=0.02)

    def test_gradient_matches_finite_differences(self):
        arch = ModelArchitecture((1, 3), (1, 2), (5, 1), [(0, 1)], BAR_BOX)
        prob = bar_problem(arch=arch, n=21)
        dist = ParameterDistribution("uniform_box", (0.5,), (3.0,), seed=1)
        etas = sample_parameters(dist, 2, 0)
        rng = np.random.default_rng(2)
        for _ in range(5):
            theta = rng.normal(size=len(init_network(arch, 0).flat))
            g = tape_gradient(lambda t: prob.terms(t, etas).total, theta)
            fd = np.zeros_like(theta)
            for k in range(len(theta)):
                e = np.zeros_like(theta)
                e[k] = 1e-6
                fd[k] = (prob.terms(theta + e, etas).per_sample.mean()
                         - prob.terms(theta - e, etas).per_sample.mean()) / 2e-6
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4

    def test_frozen_set_is_fixed(self):
        prob = bar_problem(n=11)
        obj = ExpectedEnergy(prob, ParameterDistribution("uniform_box", (0.5,), (3.0,)), 4)
        flat = init_network(prob.arch, 0).flat
        assert obj(flat, None)[0] == obj(flat, None)[0]
        assert obj(flat, 1)[0] != obj(flat, 2)[0]

    def test_point_objective(self):
        prob = bar_problem(n=11)
        flat = init_network(prob.arch, 0).flat
        loss, _, _ = PointObjective(prob, [2.0])(flat, 7)
        assert loss == pytest.approx(prob.terms(flat, [[2.0]]).per_sample[0], rel=1e-14)


class TestSampling:
    def test_uniform_mean_and_range(self):
        s = sample_parameters(ParameterDistribution("uniform_box", (0.5,), (3.0,), seed=0), 10_000, 0)
        assert s.shape == (10_000, 1)
        assert s.min() >= 0.5 and s.max() <= 3.0
        assert 1.70 <= s.mean() <= 1.80

    def test_reproducible_per_epoch(self):
        dist = ParameterDistribution("uniform_box", (0.5, 0.1), (3.0, 0.2), seed=5)
        np.testing.assert_array_equal(sample_parameters(dist, 8, 3), sample_parameters(dist, 8, 3))
        assert not np.array_equal(sample_parameters(dist, 8, 3), sample_parameters(dist, 8, 4))

    def test_zero_width_box(self):
        s = sample_parameters(ParameterDistribution("uniform_box", (1.2,), (1.2,)), 50, 0)
        assert np.all(s == 1.2)

    def test_truncated_gaussian_stays_inside(self):
        dist = ParameterDistribution("truncated_gaussian", (800.0, 0.25), (1200.0, 0.35),
                                     mean=(1300.0, 0.3), cov=((200.0 ** 2, 0.0), (0.0, 0.05 ** 2)))
        s = sample_parameters(dist, 500, 0)
        assert len(s) == 500
        assert dist.contains(s.min(axis=0)) and dist.contains(s.max(axis=0))

    def test_incompatible_gaussian(self):
        dist = ParameterDistribution("truncated_gaussian", (0.0,), (1.0,), mean=(50.0,),
                                     cov=((1.0,),))
        with pytest.raises(ConfigError, match="acceptance"):
            sample_parameters(dist, 10, 0)

    def test_bad_distribution(self):
        with pytest.raises(ConfigError):
            ParameterDistribution("beta", (0.0,), (1.0,))
        with pytest.raises(ConfigError):
            ParameterDistribution("uniform_box", (2.0,), (1.0,))
        with pytest.raises(ConfigError):
            sample_parameters(ParameterDistribution("uniform_box", (0.0,), (1.0,)), 0, 0)
