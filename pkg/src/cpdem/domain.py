"""Tensor-product collocation grids, quadrature, and hard Dirichlet ansatzes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

RULES = ("trapezoid", "simpson")


def _rule_weights(n: int, a: float, b: float, rule: str) -> np.ndarray:
    h = (b - a) / (n - 1)
    if rule == "trapezoid":
        w = np.full(n, h)
        w[0] = w[-1] = h / 2
        return w
    if rule == "simpson":
        if n % 2 == 0:
            raise ConfigError(f"Simpson weights need an odd point count, got {n}")
        w = np.full(n, 2.0)
        w[1:-1:2] = 4.0
        w[0] = w[-1] = 1.0
        return w * h / 3
    raise ConfigError(f"unknown quadrature rule {rule!r}")


@dataclass
class NeumannSegment:
    face: str
    indices: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    traction: np.ndarray


@dataclass
class CollocationDomain:
    dim: int
    box: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    points: np.ndarray
    weights: np.ndarray
    rule: str = "trapezoid"
    neumann_segments: list[NeumannSegment] = field(default_factory=list)

    @property
    def n_points(self):
        return len(self.points)

    @property
    def volume(self):
        return math.prod(b - a for a, b in self.box)

    def face_indices(self, axis: int, side: str) -> np.ndarray:
        lo, hi = self.box[axis]
        target = lo if side == "min" else hi
        return np.flatnonzero(self.points[:, axis] == target)

    def face_segment(self, face: str, traction: Sequence[float]) -> NeumannSegment:
        """Boundary segment on face ``"x{axis}_{min|max}"`` (axes numbered from 1)."""
        axis, side = _parse_face(face, self.dim)
        idx = self.face_indices(axis, side)
        others = [k for k in range(self.dim) if k != axis]
        w = np.ones(len(idx))
        for k in others:
            a, b = self.box[k]
            w1 = _rule_weights(self.counts[k], a, b, self.rule)
            coord = self.points[idx, k]
            pos = np.rint((coord - a) / (b - a) * (self.counts[k] - 1)).astype(int)
            w = w * w1[pos]
        t = np.asarray(traction, dtype=float)
        if t.shape != (self.dim,):
            raise ConfigError(f"traction on {face} must have {self.dim} components")
        return NeumannSegment(face, idx, self.points[idx], w, t)

    def add_traction(self, face: str, traction: Sequence[float]) -> NeumannSegment:
        seg = self.face_segment(face, traction)
        self.neumann_segments.append(seg)
        return seg


def _parse_face(face: str, dim: int):
    try:
        axis_part, side = face.split("_")
        axis = int(axis_part.lstrip("x")) - 1
    except ValueError:
        raise ConfigError(f"face id must look like 'x1_max', got {face!r}") from None
    if side not in ("min", "max") or not 0 <= axis < dim:
        raise ConfigError(f"invalid face {face!r} for a {dim}D domain")
    return axis, side


def build_grid(dim: int, box: Sequence[Sequence[float]], counts, rule: str = "trapezoid") -> CollocationDomain:
    """Equally spaced tensor grid including the faces, with product weights.

    Points are ordered with the first axis varying slowest.
    """
    counts = (int(counts),) if np.isscalar(counts) else tuple(int(c) for c in counts)
    box = tuple((float(a), float(b)) for a, b in box)
    if dim not in (1, 2, 3) or len(box) != dim or len(counts) != dim:
        raise ConfigError(f"box and counts must both have {dim} axes")
    if min(counts) < 2:
        raise ConfigError(f"need at least 2 points per axis, got {counts}")
    for a, b in box:
        if not b > a:
            raise ConfigError(f"empty interval ({a}, {b})")
    axes = [np.linspace(a, b, n) for (a, b), n in zip(box, counts)]
    wts = [_rule_weights(n, a, b, rule) for (a, b), n in zip(box, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*wts, indexing="ij")
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    return CollocationDomain(dim, box, counts, points, weights, rule)


def _checked(values, points):
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if finite.ndim > 1:
        finite = finite.all(axis=tuple(range(1, finite.ndim)))
    if not finite.all():
        i = int(np.flatnonzero(~finite)[0])
        raise FloatingPointError(f"non-finite integrand at point {i}, X={tuple(points[i])}")
    return values


def integrate_domain(domain: CollocationDomain, f) -> float:
    """Sum of w_i f(x_i) with exactly rounded summation in point order.

    ``f`` is either per-point values or a callable on the (n, d) point array.
    """
    values = f(domain.points) if callable(f) else f
    values = _checked(values, domain.points)
    return math.fsum(domain.weights * values)


def integrate_boundary(segment: NeumannSegment, f) -> float:
    """Sum of w_k (t . f(x_k)) over a Neumann segment."""
    values = f(segment.points) if callable(f) else f
    values = _checked(np.reshape(values, (len(segment.points), -1)), segment.points)
    return math.fsum(segment.weights * (values @ segment.traction))


ANSATZ_KINDS = ("multiply_by_x1", "multiply_by_X", "custom_affine")


@dataclass(frozen=True)
class DirichletAnsatz:
    """u = m(X) * z + offset with an affine multiplier m.

    ``multiply_by_x1`` and ``multiply_by_X`` use m = x1 (the two names differ
    only in name, kept for config compatibility); ``custom_affine`` uses
    m = coeffs . X + constant.
    """

    kind: str = "multiply_by_x1"
    coeffs: tuple[float, ...] = ()
    constant: float = 0.0
    offset: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ANSATZ_KINDS:
            raise ConfigError(f"unknown ansatz kind {self.kind!r}")
        if self.kind == "custom_affine" and not self.coeffs:
            raise ConfigError("custom_affine ansatz needs coefficients")

    def multiplier(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = X.shape[1]
        if self.kind == "custom_affine":
            a = np.asarray(self.coeffs, dtype=float)
            if a.shape != (d,):
                raise ConfigError(f"ansatz coefficients must have {d} entries")
            return X @ a + self.constant, np.broadcast_to(a, X.shape).copy()
        dm = np.zeros_like(X)
        dm[:, 0] = 1.0
        return X[:, 0].copy(), dm

    def offset_vector(self, d):
        if not self.offset:
            return np.zeros(d)
        off = np.asarray(self.offset, dtype=float)
        if off.shape != (d,):
            raise ConfigError(f"ansatz offset must have {d} entries")
        return off


def compose(ansatz: DirichletAnsatz, X_rows, z):
    """Apply the ansatz to a raw output ``z`` (Dual over rows).

    Returns ``(u, grad_u)`` as lists: ``u[i]`` is the i-th displacement
    component per row and ``grad_u[i][j]`` its derivative along X_j, via the
    product rule d(m z_i)/dX_j = dm/dX_j z_i + m dz_i/dX_j.
    """
    m, dm = ansatz.multiplier(X_rows)
    d = dm.shape[1]
    off = ansatz.offset_vector(d)
    zc = [z.value[:, i] for i in range(d)]
    u = [zc[i] * m + off[i] if off[i] else zc[i] * m for i in range(d)]
    grad_u = []
    for i in range(d):
        row = []
        for j in range(d):
            term = z.tangents[j][:, i] * m
            if np.any(dm[:, j]):
                term = term + zc[i] * dm[:, j]
            row.append(term)
        grad_u.append(row)
    return u, grad_u


def apply_ansatz(ansatz: DirichletAnsatz, X, raw):
    """Single-point version taking a :class:`~cpdem.network.NetworkOutput`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m, dm = ansatz.multiplier(X)
    m, dm = m[0], dm[0]
    zhat = np.asarray(raw.u, dtype=float)
    off = ansatz.offset_vector(len(zhat))
    u = m * zhat + off
    grad_u = np.outer(zhat, dm) + m * np.asarray(raw.coord_jacobian, dtype=float)
    return u, grad_u
