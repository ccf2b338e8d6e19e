"""Forward-mode tangents nested inside a reverse-mode gradient tape.

Two value types cooperate here:

* :class:`Var` is a node on a :class:`Tape`.  Its value is a numpy array (a
  0-d array for scalars), and every operation on it appends a node carrying
  the local adjoint rule.  ``Tape.gradient`` replays the nodes backwards.
* :class:`Dual` carries a primal value plus a fixed number of tangent slots.
  Its components may be floats, numpy arrays, ``Var`` nodes or other ``Dual``
  values, so ``Dual[Var]`` gives reverse-over-forward differentiation and
  ``Dual[Dual]`` gives second derivatives.

The primitive set is closed: add, sub, mul, div, neg, pow, exp, log, tanh,
relu, minimum, maximum, plus the structural operations matmul, transpose,
sum, indexing, reshape and concatenate that arrays need.
"""
from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np


class DomainError(ArithmeticError):
    """An operation was applied outside its mathematical domain."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class NonFiniteError(FloatingPointError):
    """A recorded value is inf or nan."""

    def __init__(self, message, node=None, op=None):
        super().__init__(message)
        self.node = node
        self.op = op


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of primitive operations.

    Each node stores its value, the indices of its parents and a function
    mapping the output adjoint to a tuple of parent adjoints.  Leaves are
    registered with :meth:`leaf` and are the only nodes whose gradients are
    returned.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.backward: list[Callable | None] = []
        self.ops: list[str] = []
        self.leaves: dict[int, int] = {}

    def __len__(self):
        return len(self.values)

    def reset(self):
        self.values.clear()
        self.parents.clear()
        self.backward.clear()
        self.ops.clear()
        self.leaves.clear()

    def _push(self, value, parents, backward, op) -> Var:
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.backward.append(backward)
        self.ops.append(op)
        return Var(self, idx)

    def leaf(self, value, index: int | None = None) -> Var:
        """Register a trainable input.  ``index`` defaults to registration order."""
        value = np.array(value, dtype=float)
        var = self._push(value, (), None, "leaf")
        self.leaves[len(self.leaves) if index is None else index] = var.idx
        return var

    def first_nonfinite(self):
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return i
        return None

    def gradient(self, output: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
        """Adjoints of ``output`` (must be a scalar) for ``wrt`` or every leaf."""
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        out_val = self.values[output.idx]
        if out_val.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {out_val.shape}")
        if not np.isfinite(out_val).all():
            self._raise_nonfinite()
        if wrt is None:
            wrt = [Var(self, self.leaves[k]) for k in sorted(self.leaves)]

        grads: list[np.ndarray | None] = [None] * (output.idx + 1)
        grads[output.idx] = np.ones_like(out_val)
        for i in range(output.idx, -1, -1):
            g = grads[i]
            if g is None or self.backward[i] is None:
                continue
            contribs = self.backward[i](g)
            for p, c in zip(self.parents[i], contribs):
                if c is None:
                    continue
                grads[p] = c if grads[p] is None else grads[p] + c

        result = []
        for v in wrt:
            g = grads[v.idx] if v.idx < len(grads) else None
            result.append(np.zeros_like(self.values[v.idx]) if g is None else g)
        return result

    def _raise_nonfinite(self):
        i = self.first_nonfinite()
        raise NonFiniteError(
            f"non-finite value first produced by node {i} ({self.ops[i]})", node=i, op=self.ops[i]
        )


def _record(op, value, parents: Sequence[Var], backward):
    tape = parents[0].tape
    return tape._push(value, tuple(p.idx for p in parents), backward, op)


def _lift(tape, x):
    """Wrap a constant so binary ops can treat both sides as Vars."""
    return x if isinstance(x, Var) else tape._push(np.asarray(x, dtype=float), (), None, "const")


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(node={self.idx}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

    # binary arithmetic -----------------------------------------------------
    # A constant operand never becomes a tape node; only Var parents get adjoints.
    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        sa = self.shape
        if not isinstance(other, Var):
            return _record("add", self.value + other, (self,), lambda g: (_unbroadcast(g, sa),))
        sb = other.shape
        return _record("add", self.value + other.value, (self, other),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        sa = self.shape
        if not isinstance(other, Var):
            return _record("sub", self.value - other, (self,), lambda g: (_unbroadcast(g, sa),))
        sb = other.shape
        return _record("sub", self.value - other.value, (self, other),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def __rsub__(self, other):
        sa = self.shape
        return _record("sub", other - self.value, (self,), lambda g: (-_unbroadcast(g, sa),))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        av = self.value
        if not isinstance(other, Var):
            bv = np.asarray(other, dtype=float)
            return _record("mul", av * bv, (self,), lambda g: (_unbroadcast(g * bv, av.shape),))
        bv = other.value
        return _record("mul", av * bv, (self, other),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        av = self.value
        if not isinstance(other, Var):
            bv = np.asarray(other, dtype=float)
            if np.any(bv == 0):
                raise DomainError("division by zero", value=bv)
            return _record("div", av / bv, (self,), lambda g: (_unbroadcast(g / bv, av.shape),))
        bv = other.value
        if np.any(bv == 0):
            raise DomainError("division by zero", value=bv)
        out = av / bv
        return _record("div", out, (self, other),
                       lambda g: (_unbroadcast(g / bv, av.shape),
                                  _unbroadcast(-g * out / bv, bv.shape)))

    def __rtruediv__(self, other):
        bv = self.value
        if np.any(bv == 0):
            raise DomainError("division by zero", value=bv)
        out = np.asarray(other, dtype=float) / bv
        return _record("div", out, (self,), lambda g: (_unbroadcast(-g * out / bv, bv.shape),))

    def __neg__(self):
        return _record("neg", -self.value, (self,), lambda g: (-g,))

    def __pos__(self):
        return self

    def __pow__(self, other):
        if isinstance(other, (Var, Dual)):
            return exp(log(self) * other)
        p = float(other)
        av = self.value
        if p != int(p) and np.any(av < 0):
            raise DomainError("fractional power of a negative value", value=av)
        return _record("pow", av ** p, (self,), lambda g: (g * p * av ** (p - 1),))

    def __rpow__(self, other):
        return exp(log(_lift(self.tape, other)) * self)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        av = self.value
        if not isinstance(other, Var):
            bv = np.asarray(other, dtype=float)
            return _record("matmul", av @ bv, (self,), lambda g: _matmul_adjoint(g, av, bv)[:1])
        bv = other.value
        return _record("matmul", av @ bv, (self, other), lambda g: _matmul_adjoint(g, av, bv))

    def __rmatmul__(self, other):
        av = np.asarray(other, dtype=float)
        bv = self.value
        return _record("matmul", av @ bv, (self,), lambda g: _matmul_adjoint(g, av, bv)[1:])

    # structural ------------------------------------------------------------
    @property
    def T(self):
        return _record("transpose", self.value.T, (self,), lambda g: (g.T,))

    def __getitem__(self, key):
        shape = self.shape
        fancy = _is_fancy(key)

        def backward(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, key, g)
            else:
                full[key] = g
            return (full,)

        return _record("getitem", self.value[key], (self,), backward)

    def reshape(self, *shape):
        old = self.shape
        return _record("reshape", self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None):
        shape = self.shape
        out = self.value.sum(axis=axis)

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record("sum", out, (self,), backward)


def _matmul_adjoint(g, av, bv):
    if av.ndim == 1 and bv.ndim == 1:
        return g * bv, g * av
    if av.ndim == 1:
        return bv @ g, np.outer(av, g)
    if bv.ndim == 1:
        return np.outer(g, bv), av.T @ g
    return g @ bv.T, av.T @ g


def _is_fancy(key):
    if isinstance(key, tuple):
        return any(_is_fancy(k) for k in key)
    return isinstance(key, (list, np.ndarray))


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------

class Dual:
    """Primal value plus tangent slots, one per seeded input direction."""

    __slots__ = ("value", "tangents")
    __array_ufunc__ = None

    def __init__(self, value, tangents):
        self.value = value
        self.tangents = tuple(tangents)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangents!r})"

    @property
    def shape(self):
        return np.shape(primal(self.value))

    def __len__(self):
        return len(primal(self.value))

    def _coerce(self, other):
        if isinstance(other, Dual):
            if len(other.tangents) != len(self.tangents):
                raise ValueError("tangent slot counts differ")
            return other
        return Dual(other, (0.0,) * len(self.tangents))

    def __add__(self, other):
        o = self._coerce(other)
        return Dual(self.value + o.value, [a + b for a, b in zip(self.tangents, o.tangents)])

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        o = self._coerce(other)
        return Dual(self.value - o.value, [a - b for a, b in zip(self.tangents, o.tangents)])

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        if not isinstance(other, Dual):
            return Dual(self.value * other, [t * other for t in self.tangents])
        o = self._coerce(other)
        return Dual(self.value * o.value,
                    [a * o.value + self.value * b for a, b in zip(self.tangents, o.tangents)])

    def __rmul__(self, other):
        return Dual(other * self.value, [other * t for t in self.tangents])

    def __truediv__(self, other):
        if not isinstance(other, Dual):
            _check_nonzero(other)
            return Dual(self.value / other, [t / other for t in self.tangents])
        _check_nonzero(other.value)
        out = self.value / other.value
        return Dual(out, [(a - out * b) / other.value
                          for a, b in zip(self.tangents, other.tangents)])

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Dual(-self.value, [-t for t in self.tangents])

    def __pos__(self):
        return self

    def __pow__(self, other):
        if isinstance(other, Dual):
            return exp(log(self) * other)
        p = float(other)
        if p == 0:
            return Dual(self.value ** 0, [t * 0.0 for t in self.tangents])
        dv = p * self.value ** (p - 1)
        return Dual(self.value ** p, [dv * t for t in self.tangents])

    def __rpow__(self, other):
        return exp(log(other) * self)

    def __matmul__(self, other):
        if not isinstance(other, Dual):
            return Dual(self.value @ other, [t @ other for t in self.tangents])
        return Dual(self.value @ other.value,
                    [a @ other.value + self.value @ b for a, b in zip(self.tangents, other.tangents)])

    def __rmatmul__(self, other):
        return Dual(other @ self.value, [other @ t for t in self.tangents])

    def __getitem__(self, key):
        return Dual(self.value[key], [_index_tangent(t, key) for t in self.tangents])

    @property
    def T(self):
        return Dual(self.value.T, [_transpose(t) for t in self.tangents])

    def reshape(self, *shape):
        return Dual(self.value.reshape(*shape), [_reshape_tangent(t, shape) for t in self.tangents])

    def sum(self, axis=None):
        return Dual(self.value.sum(axis=axis), [_sum_tangent(t, axis) for t in self.tangents])


def _index_tangent(t, key):
    return t if isinstance(t, numbers.Number) else t[key]


def _transpose(t):
    return t if isinstance(t, numbers.Number) else t.T


def _reshape_tangent(t, shape):
    return t if isinstance(t, numbers.Number) else t.reshape(*shape)


def _sum_tangent(t, axis):
    return t if isinstance(t, numbers.Number) and t == 0 else t.sum(axis=axis)


def _check_nonzero(x):
    v = primal(x)
    if np.any(np.asarray(v) == 0):
        raise DomainError("division by zero", value=v)


def primal(x):
    """Innermost numeric value, stripping Dual and Var wrappers."""
    while True:
        if isinstance(x, Dual):
            x = x.value
        elif isinstance(x, Var):
            return x.value
        else:
            return x


# ---------------------------------------------------------------------------
# elementary functions dispatching on the argument type
# ---------------------------------------------------------------------------

def exp(x):
    if isinstance(x, Dual):
        e = exp(x.value)
        return Dual(e, [e * t for t in x.tangents])
    if isinstance(x, Var):
        out = np.exp(x.value)
        return _record("exp", out, (x,), lambda g: (g * out,))
    return np.exp(x)


def log(x):
    v = primal(x)
    if np.any(np.asarray(v) <= 0):
        bad = np.asarray(v)
        bad = bad[bad <= 0].flat[0] if bad.ndim else bad
        raise DomainError(f"log of non-positive value {float(bad)!r}", value=float(bad))
    if isinstance(x, Dual):
        return Dual(log(x.value), [t / x.value for t in x.tangents])
    if isinstance(x, Var):
        xv = x.value
        return _record("log", np.log(xv), (x,), lambda g: (g / xv,))
    return np.log(x)


def tanh(x):
    if isinstance(x, Dual):
        th = tanh(x.value)
        d = 1.0 - th * th
        return Dual(th, [d * t for t in x.tangents])
    if isinstance(x, Var):
        out = np.tanh(x.value)
        return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))
    return np.tanh(x)


def relu(x):
    """max(x, 0) with subgradient 0 at exactly 0."""
    if isinstance(x, Dual):
        mask = (np.asarray(primal(x.value)) > 0).astype(float)
        return Dual(relu(x.value), [mask * t for t in x.tangents])
    if isinstance(x, Var):
        mask = (x.value > 0).astype(float)
        return _record("relu", x.value * mask, (x,), lambda g: (g * mask,))
    return np.maximum(x, 0.0) * 1.0


def _select(mask, a, b):
    # mask is a constant float array; derivative flows to the selected branch
    return a * mask + b * (1.0 - mask)


def minimum(a, b):
    """Elementwise min; ties send the derivative to ``a``."""
    mask = (np.asarray(primal(a)) <= np.asarray(primal(b))).astype(float)
    if not isinstance(a, (Var, Dual)) and not isinstance(b, (Var, Dual)):
        return np.minimum(a, b)
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _select(mask, a, b)
    return _binary_select("minimum", mask, a, b)


def maximum(a, b):
    """Elementwise max; ties send the derivative to ``a``."""
    mask = (np.asarray(primal(a)) >= np.asarray(primal(b))).astype(float)
    if not isinstance(a, (Var, Dual)) and not isinstance(b, (Var, Dual)):
        return np.maximum(a, b)
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _select(mask, a, b)
    return _binary_select("maximum", mask, a, b)


def _binary_select(op, mask, a, b):
    tape = (a if isinstance(a, Var) else b).tape
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    out = a.value * mask + b.value * (1.0 - mask)
    return _record(op, out, (a, b),
                   lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * (1.0 - mask), sb)))


def concatenate(parts, axis=-1):
    """Concatenate arrays, Vars or Duals along ``axis``."""
    if any(isinstance(p, Dual) for p in parts):
        n = next(len(p.tangents) for p in parts if isinstance(p, Dual))
        values = [p.value if isinstance(p, Dual) else p for p in parts]
        tangents = []
        for k in range(n):
            tk = []
            for p in parts:
                if isinstance(p, Dual) and not isinstance(p.tangents[k], numbers.Number):
                    tk.append(p.tangents[k])
                else:
                    tk.append(np.zeros(np.shape(primal(p))))
            tangents.append(concatenate(tk, axis))
        return Dual(concatenate(values, axis), tangents)
    if any(isinstance(p, Var) for p in parts):
        tape = next(p for p in parts if isinstance(p, Var)).tape
        vs = [_lift(tape, p) for p in parts]
        sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
        return _record("concat", np.concatenate([v.value for v in vs], axis=axis), vs,
                       lambda g: tuple(np.split(g, sizes, axis=axis)))
    return np.concatenate(parts, axis=axis)


# ---------------------------------------------------------------------------
# convenience entry points
# ---------------------------------------------------------------------------

def dual_eval(f, x, seed: int):
    """Return ``(f(x), df/dx[seed])`` by forward-mode evaluation."""
    x = [float(v) for v in np.atleast_1d(x)]
    if not 0 <= seed < len(x):
        raise IndexError(f"seed {seed} outside input of length {len(x)}")
    args = [Dual(v, (1.0 if i == seed else 0.0,)) for i, v in enumerate(x)]
    out = f(*args)
    if not isinstance(out, Dual):
        return float(out), 0.0
    return float(np.asarray(out.value)), float(np.asarray(out.tangents[0]))


def tape_gradient(f, leaves, tape: Tape | None = None) -> np.ndarray:
    """Gradient of scalar ``f(leaf_var)`` with respect to the leaf vector.

    ``f`` receives a single :class:`Var` holding the whole vector and may
    index into it.
    """
    tape = Tape() if tape is None else tape
    tape.reset()
    theta = tape.leaf(np.asarray(leaves, dtype=float))
    out = f(theta)
    if not isinstance(out, Var):
        return np.zeros_like(theta.value)
    (g,) = tape.gradient(out, [theta])
    if not np.all(np.isfinite(g)):
        tape._raise_nonfinite()
    return g
