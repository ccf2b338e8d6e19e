"""Kinematics and strain-energy densities.

All functions are written against plain arithmetic so they accept floats,
numpy arrays (one entry per collocation row), tape ``Var`` values or ``Dual``
numbers interchangeably.  Matrices are nested sequences indexed ``m[i][j]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InvertedElementError

J_MIN = 1e-8

MODEL_KINDS = ("linear_elastic", "neo_hookean", "mooney_rivlin")
SAMPLE_KINDS = ("isotropic_E_nu", "mooney_rivlin_C1_C2")


@dataclass(frozen=True)
class MaterialSample:
    kind: str
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.kind == "isotropic_E_nu":
            E, nu = self.values
            if not E > 0:
                raise ConfigError(f"Young's modulus must be positive, got {E}")
            if not 0 <= nu < 0.5:
                raise ConfigError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
        elif self.kind == "mooney_rivlin_C1_C2":
            c1, c2 = self.values
            if c1 < 0 or c2 < 0 or not c1 + c2 > 0:
                raise ConfigError(f"Mooney-Rivlin constants need C1, C2 >= 0 and C1 + C2 > 0, got {c1}, {c2}")
        else:
            raise ConfigError(f"unknown material kind {self.kind!r}")


@dataclass(frozen=True)
class LameParams:
    lam: float | np.ndarray
    mu: float | np.ndarray


def lame_from_E_nu(eta) -> LameParams:
    """Lamé constants from (E, nu); accepts a MaterialSample, a pair or arrays."""
    if isinstance(eta, MaterialSample):
        if eta.kind != "isotropic_E_nu":
            raise ConfigError(f"expected an (E, nu) sample, got {eta.kind}")
        E, nu = eta.values
    else:
        E, nu = eta
    E = np.asarray(E, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu >= 0.5):
        raise ConfigError(f"Poisson ratio {float(np.max(nu))} reaches the incompressible limit 0.5")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    if lam.ndim == 0:
        return LameParams(float(lam), float(mu))
    return LameParams(lam, mu)


def _as_nested(m):
    if isinstance(m, np.ndarray) and m.dtype != object:
        return [[float(v) for v in row] for row in m]
    return [list(row) for row in m]


def small_strain(grad_u):
    g = _as_nested(grad_u)
    d = len(g)
    return [[0.5 * (g[i][j] + g[j][i]) if i != j else g[i][i] for j in range(d)] for i in range(d)]


def linear_energy_density(eps, lame: LameParams):
    """0.5 * lam * tr(eps)^2 + mu * eps:eps."""
    e = _as_nested(eps)
    d = len(e)
    tr = e[0][0]
    for i in range(1, d):
        tr = tr + e[i][i]
    contraction = e[0][0] * e[0][0]
    for i in range(d):
        for j in range(d):
            if i == 0 and j == 0:
                continue
            contraction = contraction + e[i][j] * e[i][j]
    return 0.5 * lame.lam * (tr * tr) + lame.mu * contraction


class KinematicState:
    """Finite-strain kinematics for a displacement gradient of size d x d.

    ``F`` is always 3 x 3: for d = 2 the out-of-plane stretch is 1 (plane
    strain) and for d = 1 both lateral stretches are 1 (uniaxial bar).  The
    invariants use closed forms for each case so that constant zero entries
    never enter the arithmetic.
    """

    def __init__(self, grad_u, dim: int | None = None, F=None):
        if F is not None:
            self.dim = 3
            self.grad_u = [[F[i][j] - (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
            self.F = [list(r) for r in F]
            return
        g = _as_nested(grad_u)
        self.dim = len(g) if dim is None else dim
        self.grad_u = g
        d = self.dim
        F = [[(1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
        for i in range(d):
            for j in range(d):
                F[i][j] = g[i][j] + 1.0 if i == j else g[i][j]
        self.F = F

    @cached_property
    def strain(self):
        return small_strain(self.grad_u)

    @cached_property
    def J(self):
        F = self.F
        if self.dim == 1:
            return F[0][0]
        if self.dim == 2:
            return F[0][0] * F[1][1] - F[0][1] * F[1][0]
        return (F[0][0] * (F[1][1] * F[2][2] - F[1][2] * F[2][1])
                - F[0][1] * (F[1][0] * F[2][2] - F[1][2] * F[2][0])
                + F[0][2] * (F[1][0] * F[2][1] - F[1][1] * F[2][0]))

    @cached_property
    def _trace_c_active(self):
        # sum of F_ij^2 over the active d x d block
        F = self.F
        d = self.dim
        total = F[0][0] * F[0][0]
        for i in range(d):
            for j in range(d):
                if i or j:
                    total = total + F[i][j] * F[i][j]
        return total

    @cached_property
    def I1(self):
        return self._trace_c_active + float(3 - self.dim)

    @cached_property
    def C(self):
        F = self.F
        C = [[None] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(3):
                acc = F[0][i] * F[0][j]
                for k in (1, 2):
                    acc = acc + F[k][i] * F[k][j]
                C[i][j] = acc
        return C

    @cached_property
    def I2(self):
        if self.dim == 1:
            return 2.0 * self.F[0][0] * self.F[0][0] + 1.0
        if self.dim == 2:
            # C = diag(C2, 1): I2 = det(C2) + tr(C2) = J^2 + tr(C2)
            return self.J * self.J + self._trace_c_active
        C = self.C
        tr = C[0][0] + C[1][1] + C[2][2]
        tr_sq = C[0][0] * C[0][0]
        for i in range(3):
            for j in range(3):
                if i or j:
                    tr_sq = tr_sq + C[i][j] * C[j][i]
        return 0.5 * (tr * tr - tr_sq)


def deformation_gradient(grad_u) -> KinematicState:
    """F = I + grad_u with the plane-strain / uniaxial embedding into 3 x 3."""
    return KinematicState(grad_u)


def _guard_J(J, point=None):
    Jv = np.asarray(ad.primal(J), dtype=float)
    bad = Jv <= J_MIN
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise InvertedElementError(Jv.ravel()[idx], index=idx, point=point)


def neo_hookean_density(state: KinematicState, lame: LameParams, point=None):
    """0.5 * lam * ln(J)^2 - mu * ln(J) + 0.5 * mu * (I1 - 3)."""
    J = state.J
    _guard_J(J, point)
    lnJ = ad.log(J)
    return 0.5 * lame.lam * (lnJ * lnJ) - lame.mu * lnJ + 0.5 * lame.mu * (state.I1 - 3.0)


def mooney_rivlin_density(state: KinematicState, c1, c2):
    return c1 * (state.I1 - 3.0) + c2 * (state.I2 - 3.0)


@dataclass(frozen=True)
class EnergyModel:
    """A strain-energy density with its parameter layout and body force.

    ``param_names`` lists the material parameters the network sees; names in
    ``fixed`` are held constant (e.g. nu = 0 for the uniaxial bars).
    ``body_force`` maps points (n, d) to force densities (n, d).
    """

    kind: str
    dim: int
    param_names: tuple[str, ...] = ("E", "nu")
    fixed: Mapping[str, float] = None
    body_force: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown energy model {self.kind!r}")
        object.__setattr__(self, "param_names", tuple(self.param_names))
        object.__setattr__(self, "fixed", dict(self.fixed or {}))
        names = set(self.param_names) | set(self.fixed)
        needed = {"C1", "C2"} if self.kind == "mooney_rivlin" else {"E", "nu"}
        if names != needed:
            raise ConfigError(f"{self.kind} needs parameters {sorted(needed)}, got {sorted(names)}")

    @property
    def sample_kind(self):
        return "mooney_rivlin_C1_C2" if self.kind == "mooney_rivlin" else "isotropic_E_nu"

    def material(self, eta) -> dict:
        """Named constitutive constants; ``eta`` is (p,) or (n, p)."""
        eta = np.asarray(eta, dtype=float)
        out = {name: eta[..., k] for k, name in enumerate(self.param_names)}
        for name, v in self.fixed.items():
            out[name] = np.full(eta.shape[:-1], float(v)) if eta.ndim > 1 else float(v)
        return out

    def sample(self, eta) -> MaterialSample:
        m = self.material(eta)
        keys = ("C1", "C2") if self.kind == "mooney_rivlin" else ("E", "nu")
        return MaterialSample(self.sample_kind, tuple(float(m[k]) for k in keys))

    def validate_eta(self, eta):
        for row in np.atleast_2d(eta):
            self.sample(row)

    def constants(self, eta):
        m = self.material(eta)
        if self.kind == "mooney_rivlin":
            return m["C1"], m["C2"]
        return lame_from_E_nu((m["E"], m["nu"]))

    def density_from_state(self, state: KinematicState, constants):
        if self.kind == "linear_elastic":
            return linear_energy_density(state.strain, constants)
        if self.kind == "neo_hookean":
            return neo_hookean_density(state, constants)
        return mooney_rivlin_density(state, *constants)

    def density(self, grad_u, eta=None, constants=None):
        """Psi for a displacement gradient; pass ``constants`` to skip the eta lookup."""
        if constants is None:
            constants = self.constants(eta)
        if self.kind == "linear_elastic":
            return linear_energy_density(small_strain(grad_u), constants)
        return self.density_from_state(deformation_gradient(grad_u), constants)


def first_pk_stress(state: KinematicState, model: EnergyModel, eta) -> np.ndarray:
    """P = dPsi/dF by forward-mode differentiation over the nine entries of F."""
    F = [[float(np.asarray(ad.primal(state.F[i][j]))) for j in range(3)] for i in range(3)]
    seeded = []
    for i in range(3):
        row = []
        for j in range(3):
            tangents = [0.0] * 9
            tangents[3 * i + j] = 1.0
            row.append(ad.Dual(F[i][j], tangents))
        seeded.append(row)
    full = KinematicState(None, F=seeded)
    psi = model.density_from_state(full, model.constants(eta))
    return np.array(psi.tangents, dtype=float).reshape(3, 3)


def neo_hookean_stress_closed_form(F, lame: LameParams) -> np.ndarray:
    """lam ln(J) F^-T - mu F^-T + mu F, for 3 x 3 numeric F."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    FinvT = np.linalg.inv(F).T
    return lame.lam * np.log(J) * FinvT - lame.mu * FinvT + lame.mu * F

