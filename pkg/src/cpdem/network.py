"""Dual-encoder network u(X, eta) = manifold([coord_encoder(X); param_encoder(eta)]).

Weights live in one flat vector so optimizers and checkpoints see a single
array.  Spatial derivatives are carried as forward-mode tangents seeded on
each physical coordinate; when the flat vector is a tape ``Var`` the same
code path records everything needed for the parameter gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
BLOCKS = ("coord", "param", "manifold")


@dataclass(frozen=True)
class ModelArchitecture:
    """Layer widths per block, activation and input normalization boxes.

    Each width list includes the block's input width, so a coordinate encoder
    ``[2, 20, 20]`` has two layers.  ``coord_box`` and ``param_box`` are the
    per-component (min, max) intervals mapped affinely onto [-1, 1].  The
    manifold output layer is linear and is multiplied by ``output_scale``.
    """

    coord_encoder_widths: tuple[int, ...]
    param_encoder_widths: tuple[int, ...]
    manifold_widths: tuple[int, ...]
    coord_box: tuple[tuple[float, float], ...]
    param_box: tuple[tuple[float, float], ...]
    activation: str = "tanh"
    output_scale: float = 1.0

    def __post_init__(self):
        for name in ("coord_encoder_widths", "param_encoder_widths", "manifold_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        object.__setattr__(self, "coord_box", tuple((float(a), float(b)) for a, b in self.coord_box))
        object.__setattr__(self, "param_box", tuple((float(a), float(b)) for a, b in self.param_box))
        self.validate()

    @property
    def dim(self) -> int:
        return self.coord_encoder_widths[0]

    @property
    def n_params(self) -> int:
        return self.param_encoder_widths[0]

    def validate(self):
        c, p, m = self.coord_encoder_widths, self.param_encoder_widths, self.manifold_widths
        if min(c + p + m) < 1:
            raise ConfigError("all layer widths must be >= 1")
        if len(c) < 2 or len(p) < 2 or len(m) < 2:
            raise ConfigError("every block needs at least one layer (two widths)")
        if not 1 <= c[0] <= 3:
            raise ConfigError(f"spatial dimension must be 1, 2 or 3, got {c[0]}")
        if m[0] != c[-1] + p[-1]:
            raise ConfigError(
                f"manifold input width {m[0]} != coord latent {c[-1]} + param latent {p[-1]}")
        if m[-1] != c[0]:
            raise ConfigError(f"manifold output width {m[-1]} != spatial dimension {c[0]}")
        if p[-1] <= p[0]:
            raise ConfigError(
                f"param latent width {p[-1]} must exceed the number of material parameters {p[0]}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.coord_box) != c[0] or len(self.param_box) != p[0]:
            raise ConfigError("normalization boxes must match the input widths")
        for lo, hi in self.coord_box:
            if not hi > lo:
                raise ConfigError(f"degenerate coordinate interval ({lo}, {hi})")
        for lo, hi in self.param_box:
            if hi < lo:
                raise ConfigError(f"inverted parameter interval ({lo}, {hi})")

    def layers(self) -> list[tuple[str, int, int]]:
        """(block, rows, cols) for every layer in flat-vector order."""
        out = []
        for block, widths in zip(BLOCKS, (self.coord_encoder_widths, self.param_encoder_widths,
                                          self.manifold_widths)):
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                out.append((block, fan_out, fan_in))
        return out

    def to_record(self) -> dict:
        return {
            "coord_encoder_widths": list(self.coord_encoder_widths),
            "param_encoder_widths": list(self.param_encoder_widths),
            "manifold_widths": list(self.manifold_widths),
            "coord_box": [list(b) for b in self.coord_box],
            "param_box": [list(b) for b in self.param_box],
            "activation": self.activation,
            "output_scale": self.output_scale,
        }

    @classmethod
    def from_record(cls, rec: dict) -> ModelArchitecture:
        return cls(
            coord_encoder_widths=tuple(rec["coord_encoder_widths"]),
            param_encoder_widths=tuple(rec["param_encoder_widths"]),
            manifold_widths=tuple(rec["manifold_widths"]),
            coord_box=tuple(tuple(b) for b in rec["coord_box"]),
            param_box=tuple(tuple(b) for b in rec["param_box"]),
            activation=rec["activation"],
            output_scale=float(rec["output_scale"]),
        )


@dataclass
class ParameterVector:
    flat: np.ndarray
    shape_table: tuple[tuple[int, int], ...]
    blocks: tuple[str, ...]
    freeze_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        if self.freeze_mask is None:
            self.freeze_mask = np.zeros(self.flat.shape, dtype=bool)
        expected = sum(r * c + r for r, c in self.shape_table)
        if self.flat.shape != (expected,) or self.freeze_mask.shape != (expected,):
            raise ConfigError(f"parameter vector length {self.flat.shape} != {expected}")

    def __len__(self):
        return len(self.flat)

    def with_flat(self, flat) -> ParameterVector:
        return replace(self, flat=np.array(flat, dtype=float), freeze_mask=self.freeze_mask.copy())

    def block_slices(self, block: str) -> list[slice]:
        out, start = [], 0
        for (r, c), b in zip(self.shape_table, self.blocks):
            n = r * c + r
            if b == block:
                out.append(slice(start, start + n))
            start += n
        return out

    def block_mask(self, block: str) -> np.ndarray:
        mask = np.zeros(len(self.flat), dtype=bool)
        for s in self.block_slices(block):
            mask[s] = True
        return mask


@dataclass
class NetworkOutput:
    u: np.ndarray
    coord_jacobian: np.ndarray


def init_network(arch: ModelArchitecture, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    arch.validate()
    rng = np.random.default_rng(seed)
    chunks, shapes, blocks = [], [], []
    for block, rows, cols in arch.layers():
        bound = np.sqrt(6.0 / (rows + cols))
        chunks.append(rng.uniform(-bound, bound, size=rows * cols))
        chunks.append(np.zeros(rows))
        shapes.append((rows, cols))
        blocks.append(block)
    return ParameterVector(np.concatenate(chunks), tuple(shapes), tuple(blocks))


def apply_freeze(params: ParameterVector, policy: str) -> ParameterVector:
    if policy == "none":
        mask = np.zeros(len(params), dtype=bool)
    elif policy == "freeze_encoders":
        mask = params.block_mask("coord") | params.block_mask("param")
    else:
        raise ConfigError(f"unknown freeze policy {policy!r}")
    return replace(params, flat=params.flat.copy(), freeze_mask=mask)


def unpack(theta, arch: ModelArchitecture):
    """Split a flat vector (ndarray or Var) into {block: [(W, b), ...]}."""
    layers = {b: [] for b in BLOCKS}
    start = 0
    for block, rows, cols in arch.layers():
        W = theta[start:start + rows * cols].reshape(rows, cols)
        start += rows * cols
        b = theta[start:start + rows]
        start += rows
        layers[block].append((W, b))
    if start != len(theta):
        raise ConfigError(f"flat vector has {len(theta)} entries, architecture needs {start}")
    return layers


def _affine(box):
    lo = np.array([a for a, _ in box])
    hi = np.array([b for _, b in box])
    width = hi - lo
    scale = np.divide(2.0, width, out=np.zeros_like(width), where=width > 0)
    return 0.5 * (lo + hi), scale


def normalize_coords(arch, X):
    mid, scale = _affine(arch.coord_box)
    return (np.asarray(X, dtype=float) - mid) * scale, scale


def normalize_params(arch, eta):
    mid, scale = _affine(arch.param_box)
    return (np.asarray(eta, dtype=float) - mid) * scale


def evaluate(theta, arch: ModelArchitecture, X, eta):
    """Raw network output on the product set of points and material samples.

    ``X`` has shape (n_points, d), ``eta`` shape (n_samples, p).  Rows of the
    result are ordered sample-major: row ``s * n_points + i`` pairs sample
    ``s`` with point ``i``.  Returns a :class:`~cpdem.autodiff.Dual` whose
    value has shape (rows, d) and whose k-th tangent is the derivative with
    respect to physical coordinate k.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    n_p, d = X.shape
    n_s = eta.shape[0]
    act = ACTIVATIONS[arch.activation]
    layers = unpack(theta, arch)

    Xn, cscale = normalize_coords(arch, X)
    seeds = []
    for k in range(d):
        t = np.zeros((n_p, d))
        t[:, k] = cscale[k]
        seeds.append(t)
    h = ad.Dual(Xn, seeds)
    for W, b in layers["coord"]:
        h = act(h @ W.T + b)
    _check(h.value, "coord encoder")

    hp = normalize_params(arch, eta)
    for W, b in layers["param"]:
        hp = act(hp @ W.T + b)
    _check(hp, "param encoder")

    # First manifold layer split by input block: the coordinate half runs on
    # n_points rows, the parameter half on n_samples rows, then broadcast.
    W1, b1 = layers["manifold"][0]
    wc = arch.coord_encoder_widths[-1]
    a_c = h @ W1[:, :wc].T
    a_p = hp @ W1[:, wc:].T + b1
    width = arch.manifold_widths[1]
    full = np.zeros((n_s, n_p, width))
    z_val = (a_c.value.reshape(1, n_p, width) + a_p.reshape(n_s, 1, width)).reshape(n_s * n_p, width)
    z_tan = [(t.reshape(1, n_p, width) + full).reshape(n_s * n_p, width) for t in a_c.tangents]
    z = ad.Dual(z_val, z_tan)

    rest = layers["manifold"][1:]
    for W, b in rest:
        z = act(z)
        z = z @ W.T + b
    _check(z.value, "manifold")
    if arch.output_scale != 1.0:
        z = z * arch.output_scale
    return z


def _check(value, layer):
    v = ad.primal(value)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite activation first appears in the {layer}")


def forward(params, arch: ModelArchitecture, X, eta) -> NetworkOutput:
    """Single-point evaluation returning the raw output and its coordinate Jacobian."""
    flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    z = evaluate(flat, arch, np.reshape(X, (1, -1)), np.reshape(eta, (1, -1)))
    u = np.asarray(z.value)[0]
    jac = np.stack([np.asarray(t)[0] for t in z.tangents], axis=1)
    return NetworkOutput(u=u, coord_jacobian=jac)


def predict(params, arch: ModelArchitecture, X, eta) -> np.ndarray:
    """Raw outputs (n_points, d) for one material sample, no tape."""
    flat = params.flat if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    return np.asarray(evaluate(flat, arch, X, np.reshape(eta, (1, -1))).value)


def default_architecture(dim: int, coord_box: Sequence, param_box: Sequence, *,
                         activation="tanh", output_scale=1.0, hidden=20, latent_param=10):
    p = len(param_box)
    return ModelArchitecture(
        coord_encoder_widths=(dim, hidden, hidden),
        param_encoder_widths=(p, latent_param, latent_param),
        manifold_widths=(hidden + latent_param, hidden, dim),
        coord_box=tuple(coord_box),
        param_box=tuple(param_box),
        activation=activation,
        output_scale=output_scale,
    )
