"""Reference solutions: analytic bar, small FE solvers, and the error metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .constitutive import lame_from_E_nu
from .errors import ConfigError, NonConvergenceError

PROVENANCES = ("analytic", "fem_linear", "newton_nonlinear")


@dataclass
class ReferenceField:
    points: np.ndarray
    values: np.ndarray
    provenance: str
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] == 1 and self.points.shape[1] > 1 and np.ndim(self.values) == 1:
            self.points = self.points.T
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.points), -1)
        if self.provenance not in PROVENANCES + ("cpdem",):
            raise ConfigError(f"unknown provenance {self.provenance!r}")


def bar_analytic(X, E, A=1.0, L=1.0):
    """u = L^2 X / (2EA) - X^3 / (6EA) for the bar under body force f(X) = X."""
    X = np.asarray(X, dtype=float)
    if not (E > 0 and A > 0 and L > 0):
        raise ConfigError(f"need E, A, L > 0, got E={E}, A={A}, L={L}")
    if np.any(X < 0) or np.any(X > L * (1 + 1e-12)):
        raise ConfigError(f"X must lie in [0, {L}]")
    return (L * L * X / 2 - X ** 3 / 6) / (E * A)


_GAUSS3 = np.polynomial.legendre.leggauss(3)


def _consistent_load(nodes, f):
    """Element load vectors int N_a f dX with 3-point Gauss (exact to degree 5)."""
    xi, wq = _GAUSS3
    x1, x2 = nodes[:-1], nodes[1:]
    h = x2 - x1
    F = np.zeros(len(nodes))
    for q, w in zip(xi, wq):
        n1, n2 = (1 - q) / 2, (1 + q) / 2
        xq = n1 * x1 + n2 * x2
        fq = np.asarray(f(xq), dtype=float) * w * h / 2
        F[:-1] += n1 * fq
        F[1:] += n2 * fq
    return F


def _body_force(f):
    return (lambda X: X) if f is None else f


def fem1d_linear(n_elements, E, A=1.0, L=1.0, f=None) -> ReferenceField:
    """Two-node bar elements, clamped at X = 0, banded direct solve."""
    if n_elements < 1:
        raise ConfigError("need at least one element")
    f = _body_force(f)
    nodes = np.linspace(0.0, L, n_elements + 1)
    h = np.diff(nodes)
    k = E * A / h
    F = _consistent_load(nodes, f)[1:]
    # reduced stiffness for the free nodes 1..n, symmetric tridiagonal
    diag = np.zeros(n_elements)
    diag[:-1] = k[:-1] + k[1:]
    diag[-1] = k[-1]
    off = -k[1:]
    ab = np.zeros((2, n_elements))
    ab[0, 1:] = off
    ab[1] = diag
    try:
        u = scipy.linalg.solveh_banded(ab, F)
    except np.linalg.LinAlgError as exc:
        raise ConfigError(f"singular bar stiffness: {exc}") from exc
    return ReferenceField(nodes[:, None], np.concatenate([[0.0], u])[:, None], "fem_linear")


def _uniaxial_stress(J, lam, mu):
    lnJ = np.log(J)
    P = lam * lnJ / J - mu / J + mu * J
    dP = lam * (1 - lnJ) / J ** 2 + mu / J ** 2 + mu
    return P, dP


def newton_bar_neohookean(n_elements, E, nu=0.0, A=1.0, L=1.0, f=None, tol=1e-10,
                          load_steps=5, max_iter=30, max_halvings=10) -> ReferenceField:
    """Finite-strain bar with F = diag(1 + u', 1, 1), Newton with load stepping.

    ``info["residuals"]`` holds the residual norms of the final load step.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    f = _body_force(f)
    lame = lame_from_E_nu((E, nu))
    nodes = np.linspace(0.0, L, n_elements + 1)
    h = np.diff(nodes)
    F_ext = _consistent_load(nodes, f)
    u = np.zeros(n_elements + 1)

    def residual(u, scale):
        J = 1.0 + np.diff(u) / h
        if np.any(J <= 0):
            return None, None
        P, dP = _uniaxial_stress(J, lame.lam, lame.mu)
        R = scale * F_ext.copy()
        R[:-1] += A * P
        R[1:] -= A * P
        k = A * dP / h
        return R[1:], k

    def solve_tangent(k, R):
        n = len(k)
        diag = np.zeros(n)
        diag[:-1] = k[:-1] + k[1:]
        diag[-1] = k[-1]
        ab = np.zeros((2, n))
        ab[0, 1:] = -k[1:]
        ab[1] = diag
        return scipy.linalg.solveh_banded(ab, R)

    lam_done, dlam = 0.0, 1.0 / load_steps
    halvings = 0
    residuals = []
    iterations = 0
    while lam_done < 1.0 - 1e-14:
        target = min(1.0, lam_done + dlam)
        trial = u.copy()
        history = []
        converged = False
        for _ in range(max_iter):
            R, k = residual(trial, target)
            if R is None:
                break
            norm = float(np.linalg.norm(R))
            history.append(norm)
            if norm < tol:
                converged = True
                break
            trial[1:] += solve_tangent(k, R)
            iterations += 1
        if converged:
            u, lam_done, residuals = trial, target, history
        else:
            halvings += 1
            if halvings > max_halvings:
                raise NonConvergenceError(
                    f"Newton failed at load factor {target:.4g} after {max_halvings} halvings")
            dlam /= 2
    return ReferenceField(nodes[:, None], u[:, None], "newton_nonlinear",
                          {"residuals": residuals, "iterations": iterations, "halvings": halvings})


def bar_neohookean_semi_analytic(X, E, nu=0.0, A=1.0, L=1.0, n_quad=2000):
    """Independent 1D check: solve P(J(X)) = (L^2 - X^2) / (2A) pointwise, integrate J - 1."""
    lame = lame_from_E_nu((E, nu))
    xs = np.linspace(0.0, L, n_quad + 1)
    N = (L * L - xs * xs) / (2 * A)
    J = np.ones_like(xs)
    for _ in range(60):
        P, dP = _uniaxial_stress(J, lame.lam, lame.mu)
        step = (P - N) / dP
        J = J - step
        if np.max(np.abs(step)) < 1e-15:
            break
    strain = J - 1.0
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (strain[1:] + strain[:-1]) * np.diff(xs))])
    # Simpson refinement on the cumulative integral would be overkill; n_quad is large
    return np.interp(np.asarray(X, dtype=float), xs, integral)


# ---------------------------------------------------------------------------
# 2D plane strain, bilinear quadrilaterals
# ---------------------------------------------------------------------------

def plane_strain_matrix(lam, mu):
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


def _q4_stiffness(a, b, D):
    """8 x 8 stiffness of an a x b rectangle, 2 x 2 Gauss quadrature."""
    g = 1 / np.sqrt(3)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    K = np.zeros((8, 8))
    for xi in (-g, g):
        for et in (-g, g):
            dN_dxi = corners[:, 0] * (1 + et * corners[:, 1]) / 4
            dN_det = corners[:, 1] * (1 + xi * corners[:, 0]) / 4
            dN_dx = dN_dxi * 2 / a
            dN_dy = dN_det * 2 / b
            B = np.zeros((3, 8))
            B[0, 0::2] = dN_dx
            B[1, 1::2] = dN_dy
            B[2, 0::2] = dN_dy
            B[2, 1::2] = dN_dx
            K += B.T @ D @ B * (a * b / 4)
    return K


@dataclass
class Q4Mesh:
    nx: int
    ny: int
    L: float
    H: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigError("need at least 2 nodes per direction")

    @property
    def points(self):
        xs = np.linspace(0, self.L, self.nx)
        ys = np.linspace(0, self.H, self.ny)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def node(self, i, j):
        return i * self.ny + j

    def connectivity(self):
        i, j = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1), indexing="ij")
        i, j = i.ravel(), j.ravel()
        return np.stack([self.node(i, j), self.node(i + 1, j), self.node(i + 1, j + 1),
                         self.node(i, j + 1)], axis=1)

    def stiffness(self, lam, mu):
        a = self.L / (self.nx - 1)
        b = self.H / (self.ny - 1)
        Ke = _q4_stiffness(a, b, plane_strain_matrix(lam, mu))
        conn = self.connectivity()
        dofs = np.empty((len(conn), 8), dtype=int)
        dofs[:, 0::2] = 2 * conn
        dofs[:, 1::2] = 2 * conn + 1
        rows = np.repeat(dofs, 8, axis=1).ravel()
        cols = np.tile(dofs, (1, 8)).ravel()
        vals = np.tile(Ke.ravel(), len(conn))
        n = 2 * self.nx * self.ny
        return scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def solve_dirichlet(K, F, fixed_dofs, fixed_values):
    """Solve K u = F with u[fixed_dofs] = fixed_values by elimination."""
    n = K.shape[0]
    u = np.zeros(n)
    u[fixed_dofs] = fixed_values
    free = np.setdiff1d(np.arange(n), fixed_dofs)
    rhs = F[free] - K[free][:, fixed_dofs] @ u[fixed_dofs]
    Kff = K[free][:, free].tocsc()
    sol = scipy.sparse.linalg.spsolve(Kff, rhs)
    if not np.all(np.isfinite(sol)):
        raise ConfigError("singular stiffness matrix")
    u[free] = sol
    return u


def fem2d_plane_strain(nx, ny, L, H, E, nu, traction=(0.0, -5.0)) -> ReferenceField:
    """Cantilever: left edge clamped, uniform traction on the right edge.

    ``nx``, ``ny`` are node counts, so the node set coincides with a
    collocation grid of the same counts.
    """
    if not 0 <= nu < 0.5:
        raise ConfigError(f"nu must lie in [0, 0.5), got {nu}")
    mesh = Q4Mesh(nx, ny, L, H)
    lame = lame_from_E_nu((E, nu))
    K = mesh.stiffness(lame.lam, lame.mu)
    F = np.zeros(K.shape[0])
    t = np.asarray(traction, dtype=float)
    hy = H / (ny - 1)
    right = [mesh.node(nx - 1, j) for j in range(ny)]
    w = np.full(ny, hy)
    w[0] = w[-1] = hy / 2
    for node, wk in zip(right, w):
        F[2 * node] += wk * t[0]
        F[2 * node + 1] += wk * t[1]
    left = np.array([mesh.node(0, j) for j in range(ny)])
    fixed = np.sort(np.concatenate([2 * left, 2 * left + 1]))
    u = solve_dirichlet(K, F, fixed, np.zeros(len(fixed)))
    return ReferenceField(mesh.points, u.reshape(-1, 2), "fem_linear")


def rel_l2_error(pred, ref) -> float:
    """||pred - ref|| / ||ref|| over all components; 0 when both vanish."""
    p_pts = getattr(pred, "points", None)
    r_pts = getattr(ref, "points", None)
    if p_pts is not None and r_pts is not None:
        if p_pts.shape != r_pts.shape or not np.allclose(p_pts, r_pts, rtol=0, atol=1e-12):
            raise ConfigError("prediction and reference live on different point sets")
    pv = np.asarray(getattr(pred, "values", pred), dtype=float)
    rv = np.asarray(getattr(ref, "values", ref), dtype=float)
    if pv.shape != rv.shape:
        raise ConfigError(f"shape mismatch {pv.shape} vs {rv.shape}")
    num = np.linalg.norm(pv - rv)
    den = np.linalg.norm(rv)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)
