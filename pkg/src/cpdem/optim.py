"""Adam, L-BFGS with a strong Wolfe line search, and the two-phase trainer.

Objectives are callables ``objective(theta, epoch) -> (loss, grad, info)``.
Integer epochs let a stochastic objective resample; the quasi-Newton phase
always passes ``epoch=None`` so that it sees one deterministic function.
"""
from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, LineSearchError
from .network import ParameterVector, apply_freeze

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "phase", "total_loss", "internal", "external", "boundary_diag", "wall_ms")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, frozen=None):
    """One bias-corrected Adam update; returns (new params, state)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ConfigError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    active = np.ones(params.shape, dtype=bool) if frozen is None else ~frozen
    bad = ~np.isfinite(grad) & active
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(f"non-finite gradient entry {i}: {grad[i]}")
    g = np.where(active, grad, 0.0)
    state.step_count += 1
    state.m = np.where(active, state.beta1 * state.m + (1 - state.beta1) * g, state.m)
    state.v = np.where(active, state.beta2 * state.v + (1 - state.beta2) * g * g, state.v)
    m_hat = state.m / (1 - state.beta1 ** state.step_count)
    v_hat = state.v / (1 - state.beta2 ** state.step_count)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = np.where(active, params - step, params)
    return new, state


@dataclass
class LbfgsState:
    m_hist: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 25
    history: deque = field(default=None)

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.m_hist)

    def push(self, s, y) -> bool:
        """Store (s, y) only when it satisfies the curvature condition."""
        if float(s @ y) > 1e-10:
            self.history.append((s.copy(), y.copy()))
            return True
        return False


def lbfgs_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """Two-loop recursion; steepest descent when the history is empty."""
    q = np.array(grad, dtype=float)
    if not state.history:
        return -q
    alphas = []
    for s, y in reversed(state.history):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((a, rho, s, y))
    s, y = state.history[-1]
    r = (float(s @ y) / float(y @ y)) * q
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (f, f') at a and b, clamped inside."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    lo, hi = min(a, b), max(a, b)
    if disc >= 0:
        d2 = np.sqrt(disc) * np.sign(b - a)
        t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
        if np.isfinite(t):
            return min(max(t, lo + 0.1 * (hi - lo)), hi - 0.1 * (hi - lo))
    return 0.5 * (lo + hi)


def wolfe_line_search(phi: Callable[[float], tuple[float, float]], f0: float, g0: float,
                      alpha0: float = 1.0, c1: float = 1e-4, c2: float = 0.9,
                      max_evals: int = 25, alpha_max: float = 1e10):
    """Step length satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns the objective and its directional derivative at
    ``alpha``; ``f0, g0`` are their values at 0.  Returns ``(alpha, f, g,
    extra)`` where ``extra`` is whatever ``phi`` attached last for the
    accepted step.  A slice that keeps descending up to ``alpha_max`` returns
    ``alpha_max``.  Raises :class:`LineSearchError` when ``g0 >= 0`` or no
    admissible step is found within ``max_evals`` evaluations.  A trial that
    inverts an element counts as an infinitely bad point.
    """
    if not g0 < 0:
        raise LineSearchError(f"not a descent direction (slope {g0})")
    evals = 0

    def probe(a):
        nonlocal evals
        evals += 1
        try:
            return phi(a)
        except DomainError:
            return np.inf, np.nan, None

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    bracket = None
    while evals < max_evals:
        fa, ga, extra = probe(a)
        if not np.isfinite(fa):
            bracket = (a_prev, f_prev, g_prev, a, np.inf, np.nan)
            break
        if fa > f0 + c1 * a * g0 or (evals > 1 and fa >= f_prev):
            bracket = (a_prev, f_prev, g_prev, a, fa, ga)
            break
        if abs(ga) <= -c2 * g0:
            return a, fa, ga, extra
        if ga >= 0:
            bracket = (a, fa, ga, a_prev, f_prev, g_prev)
            break
        if a >= alpha_max:
            # still descending at the cap: accept the bounded step
            return a, fa, ga, extra
        a_prev, f_prev, g_prev = a, fa, ga
        a = min(2.0 * a, alpha_max)
    if bracket is None:
        raise LineSearchError(f"no bracket after {evals} evaluations")

    lo, f_lo, g_lo, hi, f_hi, g_hi = bracket
    while evals < max_evals:
        if np.isfinite(f_hi) and np.isfinite(g_hi):
            a = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
        else:
            a = 0.5 * (lo + hi)
        fa, ga, extra = probe(a)
        if not np.isfinite(fa) or fa > f0 + c1 * a * g0 or fa >= f_lo:
            hi, f_hi, g_hi = a, fa, ga
        else:
            if abs(ga) <= -c2 * g0:
                return a, fa, ga, extra
            if ga * (hi - lo) >= 0:
                hi, f_hi, g_hi = lo, f_lo, g_lo
            lo, f_lo, g_lo = a, fa, ga
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    raise LineSearchError(f"strong Wolfe step not found within {max_evals} evaluations")


@dataclass
class TrainSchedule:
    adam_epochs: int = 80
    lbfgs_epochs: int = 20
    lr: float = 1e-3
    lbfgs_iters: int = 20
    m_hist: int = 10
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.adam_epochs < 0 or self.lbfgs_epochs < 0 or self.adam_epochs + self.lbfgs_epochs <= 0:
            raise ConfigError("schedule needs adam_epochs + lbfgs_epochs > 0")
        if self.lbfgs_iters < 1:
            raise ConfigError("lbfgs_iters must be >= 1")

    @classmethod
    def from_total(cls, epochs: int, adam_fraction: float = 0.8, **kw):
        adam = int(round(epochs * adam_fraction))
        return cls(adam_epochs=adam, lbfgs_epochs=epochs - adam, **kw)


class TrainingAborted(RuntimeError):
    def __init__(self, epoch, cause):
        super().__init__(f"training aborted at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.cause = cause


class Lbfgs:
    """Stateful L-BFGS driver over a deterministic objective."""

    def __init__(self, objective, theta, frozen=None, m_hist=10, c1=1e-4, c2=0.9, max_evals=25):
        self.objective = objective
        self.state = LbfgsState(m_hist=m_hist, c1=c1, c2=c2, max_evals=max_evals)
        self.frozen = np.zeros(len(theta), dtype=bool) if frozen is None else frozen
        self.theta = np.array(theta, dtype=float)
        self.f, g, self.info = objective(self.theta, None)
        self.g = self._mask(g)
        self.failures = 0

    def _mask(self, g):
        return np.where(self.frozen, 0.0, g)

    def step(self) -> bool:
        """One iteration; False if the line search failed or the gradient vanished."""
        if not np.any(self.g):
            return False
        d = lbfgs_direction(self.state, self.g)
        slope = float(d @ self.g)
        if not slope < 0:
            self.state.history.clear()
            d = -self.g
            slope = float(d @ self.g)
        alpha0 = 1.0 if self.state.history else min(1.0, 1.0 / max(np.abs(self.g).sum(), 1e-300))
        theta0 = self.theta

        def phi(a):
            trial = np.where(self.frozen, theta0, theta0 + a * d)
            f, g, info = self.objective(trial, None)
            g = self._mask(g)
            return f, float(g @ d), (trial, g, info)

        try:
            a, f, _, (trial, g, info) = wolfe_line_search(
                phi, self.f, slope, alpha0, self.state.c1, self.state.c2, self.state.max_evals)
        except LineSearchError as exc:
            log.debug("line search failed: %s", exc)
            self.failures += 1
            self.state.history.clear()
            return False
        self.state.push(trial - theta0, g - self.g)
        self.theta, self.f, self.g, self.info = trial, f, g, info
        return True


def train(params: ParameterVector, schedule: TrainSchedule, objective, *, csv_path=None,
          callback=None) -> tuple[ParameterVector, list[dict]]:
    """Adam epochs on the resampled objective, then L-BFGS on the frozen one.

    Each L-BFGS epoch runs ``schedule.lbfgs_iters`` iterations.  A failed
    line search is replaced by one Adam step at the schedule's rate.
    Returns the trained parameters and the per-epoch log.
    """
    theta = params.flat.copy()
    frozen = params.freeze_mask
    adam = AdamState.zeros(len(theta), lr=schedule.lr)
    rows = schedule.log
    rows.clear()
    writer = fh = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def record(epoch, phase, loss, info, t0):
        row = {
            "epoch": epoch, "phase": phase, "total_loss": float(loss),
            "internal": float(info.get("internal", np.nan)),
            "external": float(info.get("external", np.nan)),
            "boundary_diag": float(info.get("boundary_diag", 0.0)),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        rows.append(row)
        if writer is not None:
            writer.writerow([row["epoch"], row["phase"], repr(row["total_loss"]),
                             repr(row["internal"]), repr(row["external"]),
                             repr(row["boundary_diag"]), f"{row['wall_ms']:.3f}"])
            fh.flush()
        if callback is not None:
            callback(row)

    epoch = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(schedule.adam_epochs):
            t0 = time.perf_counter()
            loss, grad, info = objective(theta, epoch)
            theta, adam = adam_step(adam, theta, grad, frozen)
            record(epoch, "adam", loss, info, t0)

        if schedule.lbfgs_epochs:
            epoch = schedule.adam_epochs
            opt = Lbfgs(objective, theta, frozen, m_hist=schedule.m_hist)
            for epoch in range(schedule.adam_epochs, schedule.adam_epochs + schedule.lbfgs_epochs):
                t0 = time.perf_counter()
                for _ in range(schedule.lbfgs_iters):
                    if not opt.step():
                        if np.any(opt.g) and opt.failures:
                            # fall back to one bounded Adam step, then resume
                            theta_new, adam = adam_step(adam, opt.theta, opt.g, frozen)
                            f, g, info = objective(theta_new, None)
                            if f <= opt.f:
                                opt.theta, opt.f, opt.g, opt.info = theta_new, f, opt._mask(g), info
                        break
                record(epoch, "lbfgs", opt.f, opt.info, t0)
            theta = opt.theta
    except (DomainError, FloatingPointError) as exc:
        record(epoch, "aborted", np.nan, {}, t0)
        raise TrainingAborted(epoch, exc) from exc
    finally:
        if fh is not None:
            fh.close()
    return params.with_flat(theta), rows


def finetune(params: ParameterVector, objective, steps: int, *, m_hist: int = 10):
    """Up to ``steps`` L-BFGS iterations with both encoders frozen.

    ``objective`` should be the point-mass objective at the target material.
    Encoder entries of the result are bitwise equal to the input's.
    """
    frozen_params = apply_freeze(params, "freeze_encoders")
    if steps <= 0:
        return frozen_params.with_flat(params.flat), []
    opt = Lbfgs(objective, frozen_params.flat, frozen_params.freeze_mask, m_hist=m_hist)
    history = [opt.f]
    for _ in range(steps):
        if not opt.step():
            if opt.failures > 2 or not np.any(opt.g):
                break
            continue
        history.append(opt.f)
    theta = np.where(frozen_params.freeze_mask, params.flat, opt.theta)
    return frozen_params.with_flat(theta), history
