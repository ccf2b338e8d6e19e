"""Parameterized potential energy and its expectation over material samples."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .constitutive import EnergyModel
from .domain import CollocationDomain, DirichletAnsatz, compose
from .errors import ConfigError, InvertedElementError
from .network import ModelArchitecture, ParameterVector, evaluate

__all__ = [
    "EnergyModel",
    "EnergyTerms",
    "PointObjective",
    "Problem",
    "ExpectedEnergy",
    "ParameterDistribution",
    "expected_potential",
    "potential_energy",
    "sample_parameters",
]

# Stream index used for the frozen sample set of the quasi-Newton phase.
FROZEN_STREAM = 2**31 - 1

MAX_REJECTION_TRIALS = 10**6
MIN_ACCEPTANCE = 1e-3


@dataclass(frozen=True)
class ParameterDistribution:
    """Sampling law over the box ``low <= eta <= high``.

    ``truncated_gaussian`` draws from N(mean, cov) and rejects samples
    outside the box.
    """

    kind: str
    low: tuple[float, ...]
    high: tuple[float, ...]
    mean: tuple[float, ...] | None = None
    cov: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(float(x) for x in self.low))
        object.__setattr__(self, "high", tuple(float(x) for x in self.high))
        if len(self.low) != len(self.high):
            raise ConfigError("low and high must have the same length")
        if any(h < lo for lo, h in zip(self.low, self.high)):
            raise ConfigError(f"inverted parameter box {self.low} .. {self.high}")
        if self.kind == "truncated_gaussian":
            if self.mean is None or self.cov is None:
                raise ConfigError("truncated_gaussian needs mean and cov")
            p = len(self.low)
            if np.shape(self.mean) != (p,) or np.shape(self.cov) != (p, p):
                raise ConfigError("mean/cov shapes do not match the parameter box")
        elif self.kind != "uniform_box":
            raise ConfigError(f"unknown distribution kind {self.kind!r}")

    @property
    def box(self):
        return tuple(zip(self.low, self.high))

    def contains(self, eta, rtol=0.0) -> bool:
        eta = np.asarray(eta, dtype=float)
        lo, hi = np.array(self.low), np.array(self.high)
        slack = rtol * (hi - lo)
        return bool(np.all(eta >= lo - slack) and np.all(eta <= hi + slack))


def sample_parameters(dist: ParameterDistribution, n: int, epoch: int) -> np.ndarray:
    """``n`` draws as an (n, p) array; reproducible for fixed (seed, epoch)."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = np.random.default_rng([int(dist.seed), int(epoch)])
    lo, hi = np.array(dist.low), np.array(dist.high)
    if dist.kind == "uniform_box":
        return lo + (hi - lo) * rng.random((n, len(lo)))

    mean = np.asarray(dist.mean, dtype=float)
    cov = np.asarray(dist.cov, dtype=float)
    accepted, trials = [], 0
    have = 0
    batch = max(4 * n, 1000)
    while have < n:
        draw = rng.multivariate_normal(mean, cov, size=batch)
        ok = np.all((draw >= lo) & (draw <= hi), axis=1)
        trials += batch
        accepted.append(draw[ok])
        have += int(ok.sum())
        if trials >= MAX_REJECTION_TRIALS and have / trials < MIN_ACCEPTANCE:
            raise ConfigError(
                f"truncated Gaussian acceptance rate {have / trials:.2e} over {trials} trials; "
                "mean/cov and the parameter box are incompatible")
    return np.concatenate(accepted)[:n]


@dataclass
class EnergyTerms:
    """Result of one energy assembly over n_samples material draws.

    ``total`` is the sample mean of U - W (a tape ``Var`` when the parameters
    were a ``Var``); the per-sample arrays are plain floats.
    """

    total: object
    internal: np.ndarray
    external: np.ndarray
    boundary_diag: float

    @property
    def per_sample(self):
        return self.internal - self.external


@dataclass
class Problem:
    """Everything needed to assemble the energy apart from the network weights."""

    arch: ModelArchitecture
    domain: CollocationDomain
    ansatz: DirichletAnsatz
    model: EnergyModel
    _ext_coef: np.ndarray = field(default=None, repr=False)
    _dirichlet: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.model.dim != self.domain.dim or self.arch.dim != self.domain.dim:
            raise ConfigError("model, architecture and domain dimensions differ")
        if self.arch.n_params != len(self.model.param_names):
            raise ConfigError(
                f"network takes {self.arch.n_params} material inputs, model has "
                f"{len(self.model.param_names)}")
        pts, w = self.domain.points, self.domain.weights
        d = self.domain.dim
        # external work is linear in u: W = sum_i sum_c coef[i, c] u_c(x_i)
        coef = np.zeros((len(pts), d))
        if self.model.body_force is not None:
            coef += w[:, None] * np.asarray(self.model.body_force(pts), dtype=float).reshape(len(pts), d)
        for seg in self.domain.neumann_segments:
            np.add.at(coef, seg.indices, seg.weights[:, None] * seg.traction[None, :])
        self._ext_coef = coef
        m, _ = self.ansatz.multiplier(pts)
        self._dirichlet = np.flatnonzero(np.abs(m) < 1e-14)

    def terms(self, theta, etas) -> EnergyTerms:
        """Assemble U and W for every row of ``etas`` (shape (n, p))."""
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        n_s = len(etas)
        pts = self.domain.points
        n_p, d = pts.shape
        z = evaluate(theta, self.arch, pts, etas)
        X_rows = np.tile(pts, (n_s, 1))
        u, grad_u = compose(self.ansatz, X_rows, z)

        constants = self.model.constants(np.repeat(etas, n_p, axis=0))
        try:
            psi = self.model.density(grad_u, constants=constants)
        except InvertedElementError as exc:
            row = exc.index
            raise InvertedElementError(exc.J, index=row, point=pts[row % n_p],
                                       eta=etas[row // n_p]) from None

        w_rows = np.tile(self.domain.weights, n_s)
        internal = (psi * (w_rows / n_s)).sum()
        coef_rows = np.tile(self._ext_coef, (n_s, 1)) / n_s
        external = u[0] * coef_rows[:, 0]
        for c in range(1, d):
            external = external + u[c] * coef_rows[:, c]
        external = external.sum()
        total = internal - external

        psi_v = np.asarray(ad.primal(psi), dtype=float).reshape(n_s, n_p)
        u_v = np.stack([np.asarray(ad.primal(uc), dtype=float).reshape(n_s, n_p) for uc in u], axis=-1)
        int_s = np.array([math.fsum(row * self.domain.weights) for row in psi_v])
        ext_s = np.array([math.fsum((uv * self._ext_coef).ravel()) for uv in u_v])
        if not (np.all(np.isfinite(int_s)) and np.all(np.isfinite(ext_s))):
            bad = int(np.flatnonzero(~np.isfinite(int_s - ext_s))[0])
            raise FloatingPointError(f"non-finite potential energy for eta={tuple(etas[bad])}")
        diag = float(np.max(np.abs(u_v[:, self._dirichlet]))) if len(self._dirichlet) else 0.0
        return EnergyTerms(total, int_s, ext_s, diag)

    def field_energy(self, u, grad_u, eta) -> tuple[float, float]:
        """(U, W) for a prescribed field on the collocation points.

        ``u`` has shape (n_points, d) and ``grad_u`` shape (n_points, d, d);
        this is the same quadrature as :meth:`terms` without the network.
        """
        u = np.asarray(u, dtype=float).reshape(self.domain.n_points, -1)
        g = np.asarray(grad_u, dtype=float)
        d = self.domain.dim
        nested = [[g[:, i, j] for j in range(d)] for i in range(d)]
        psi = self.model.density(nested, np.reshape(eta, (1, -1)).repeat(len(u), axis=0))
        internal = math.fsum(np.asarray(psi) * self.domain.weights)
        external = math.fsum((u * self._ext_coef).ravel())
        return internal, external

    def value_and_grad(self, flat, etas, tape: ad.Tape | None = None):
        tape = ad.Tape() if tape is None else tape
        tape.reset()
        theta = tape.leaf(np.asarray(flat, dtype=float))
        terms = self.terms(theta, etas)
        (g,) = tape.gradient(terms.total, [theta])
        if not np.all(np.isfinite(g)):
            tape._raise_nonfinite()
        return float(terms.total.value), g, terms

    def displacement(self, params, eta, X=None) -> np.ndarray:
        """Displacement field (n_points, d) for one material sample, no tape."""
        flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
        X = self.domain.points if X is None else np.atleast_2d(np.asarray(X, dtype=float))
        z = evaluate(flat, self.arch, X, np.reshape(eta, (1, -1)))
        u, _ = compose(self.ansatz, X, z)
        return np.stack([np.asarray(c) for c in u], axis=1)


def potential_energy(params, arch, domain, ansatz, model, eta) -> float:
    """U - W for a single material sample."""
    model.validate_eta(eta)
    flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    terms = Problem(arch, domain, ansatz, model).terms(flat, np.reshape(eta, (1, -1)))
    return float(terms.per_sample[0])


def expected_potential(params, arch, domain, ansatz, model, dist, n_samples, epoch=0) -> float:
    """Mean of U - W over ``n_samples`` draws from the epoch's stream."""
    etas = sample_parameters(dist, n_samples, epoch)
    flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    terms = Problem(arch, domain, ansatz, model).terms(flat, etas)
    return math.fsum(terms.per_sample) / n_samples


class ExpectedEnergy:
    """Training objective ``(theta, epoch) -> (loss, grad, info)``.

    Integer epochs draw a fresh sample set from the seeded stream; ``None``
    selects the frozen set used by the quasi-Newton phase so that its
    objective is deterministic.
    """

    def __init__(self, problem: Problem, dist: ParameterDistribution, n_samples: int = 16,
                 n_frozen: int | None = None):
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        self.problem = problem
        self.dist = dist
        self.n_samples = n_samples
        self.n_frozen = n_samples if n_frozen is None else n_frozen
        self.tape = ad.Tape()
        self._frozen = None

    def samples(self, epoch):
        if epoch is None:
            if self._frozen is None:
                self._frozen = sample_parameters(self.dist, self.n_frozen, FROZEN_STREAM)
            return self._frozen
        return sample_parameters(self.dist, self.n_samples, epoch)

    def __call__(self, flat, epoch=None):
        etas = self.samples(epoch)
        loss, grad, terms = self.problem.value_and_grad(flat, etas, self.tape)
        info = {
            "internal": float(np.mean(terms.internal)),
            "external": float(np.mean(terms.external)),
            "boundary_diag": terms.boundary_diag,
        }
        return loss, grad, info


class PointObjective(ExpectedEnergy):
    """The expectation collapsed to a point mass at one material sample."""

    def __init__(self, problem: Problem, eta):
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        dist = ParameterDistribution("uniform_box", tuple(eta), tuple(eta))
        super().__init__(problem, dist, n_samples=1)
        self._frozen = eta.reshape(1, -1)

    def samples(self, epoch):
        return self._frozen
