"""Input signals, relaxation solvers and the response-model families.

Every family exposes the same small surface used by the fitter::

    model.param_names        # ordered names of the full parameter vector
    model.linear_names       # subset entering the prediction linearly
    model.design(theta, t, dose) -> (offset, M)
    model.predict(theta, t, dose) -> offset + M @ theta[linear]

so amplitudes and baselines can be profiled out by linear least squares
while the optimizer works on the remaining nonlinear parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import lfilter

from .expr_core import (
    EML,
    HILL,
    PARAMS_PER_BLOCK,
    Block,
    DomainError,
    Expression,
    Terminal,
    blocks,
    compile_expr,
    eval_expr,
    hill_eval,
    measure,
    sum_terms,
)

STATIC = "static"
RELAX = "relax"
DOSE_ODE = "dose-ode"
EMBEDDINGS = (STATIC, RELAX, DOSE_ODE)


class SolverError(DomainError):
    """Relaxation time too small relative to the integration horizon."""


def recruitment_input(t, k: float, amplitude: float = 1.0):
    """Monotone recruitment drive ``amplitude * (1 - exp(-k t))``."""
    t = np.asarray(t, dtype=float)
    return amplitude * -np.expm1(-k * t)


def m1_module(R, alpha: float, beta: float):
    """One-gate activation-suppression module ``R**alpha - beta R``."""
    return np.asarray(R, dtype=float) ** alpha - beta * np.asarray(R, dtype=float)


def m1_optimum(alpha: float, beta: float) -> float:
    """Input maximizing ``R**alpha - beta R``: ``(alpha/beta)**(1/(1-alpha))``."""
    if not (0.0 < alpha < 1.0) or not beta > 0.0:
        raise DomainError("m1_optimum needs 0 < alpha < 1 and beta > 0")
    return (alpha / beta) ** (1.0 / (1.0 - alpha))


# ---------------------------------------------------------------------------
# first-order relaxation  tau y' = -y + F(t)
# ---------------------------------------------------------------------------


STEPS_PER_TAU = 30


def substeps(dt, tau: float):
    """RK4 substeps per grid interval so that ``h <= min(tau/30, dt/4)``.

    At ``h = tau/30`` the RK4 error on a constant drive stays below
    ``4e-9 |y(0) - F|``; at ``tau/20`` it reaches about ``2e-8 |y(0) - F|``.
    """
    dt = np.asarray(dt, dtype=float)
    return np.maximum(4, np.ceil(STEPS_PER_TAU * dt / tau - 1e-9)).astype(int)


START_LEVELS = 20


def graded_start(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Refine the first interval of a grid starting at 0 geometrically.

    Inserts ``grid[1] * 2**-j`` for ``j = 20..1``.  A gate with ``c`` near 0
    responds like ``(k t)**a`` at the origin, which a uniform RK4 mesh
    resolves only to about ``1e-4``; the graded mesh brings that below
    ``1e-8`` for a few dozen extra steps.  Returns the refined grid and the
    positions of the original points in it.
    """
    if grid.size < 2 or grid[0] != 0.0:
        return grid, np.arange(grid.size)
    extra = grid[1] * 2.0 ** -np.arange(START_LEVELS, 0, -1)
    fine = np.concatenate([[0.0], extra, grid[1:]])
    keep = np.concatenate([[0], np.arange(START_LEVELS + 1, fine.size)])
    return fine, keep


def _rk4_coefficients(h: float, tau: float) -> tuple[float, float, float, float]:
    """Coefficients of one RK4 step of ``tau y' = -y + F`` written as
    ``y+ = P y + q0 F(t) + q1 F(t + h/2) + q2 F(t + h)``."""

    def step(y, f0, f1, f2):
        k1 = (f0 - y) / tau
        k2 = (f1 - (y + 0.5 * h * k1)) / tau
        k3 = (f1 - (y + 0.5 * h * k2)) / tau
        k4 = (f2 - (y + h * k3)) / tau
        return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return step(1.0, 0, 0, 0), step(0.0, 1, 0, 0), step(0.0, 0, 1, 0), step(0.0, 0, 0, 1)


def _check_grid(tau: float, times: np.ndarray):
    if not tau > 0:
        raise SolverError("tau must be positive")
    if times.ndim != 1 or times.size < 1:
        raise ValueError("times must be a non-empty 1-D grid")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if times[0] < 0:
        raise ValueError("times must start at t >= 0")
    horizon = times[-1]
    if horizon > 0 and tau < 1e-8 * horizon:
        raise SolverError(f"tau={tau:g} underflows the step rule over horizon {horizon:g}")


def relax_solve(drive: Callable, tau: float, y_init, times) -> np.ndarray:
    """Fixed-step RK4 solution of ``tau y' = -y + drive(t)`` on ``times``.

    The system starts at ``t = 0`` with ``y(0) = y_init``; ``times[0]`` may
    be 0 or later.  ``drive`` maps an array of times to an array of values,
    or to an ``(n, m)`` array to solve ``m`` independent columns at once.

    Because the equation is linear in ``y``, each RK4 step is the affine map
    ``y -> P y + q . F``; runs of equal substeps are evaluated with a linear
    recurrence filter, which gives the RK4 iterates without a Python loop.
    """
    times = np.asarray(times, dtype=float)
    _check_grid(tau, times)
    grid = times if times[0] == 0.0 else np.concatenate([[0.0], times])
    grid, keep = graded_start(grid)
    dt = np.diff(grid)
    n = substeps(dt, tau)
    h = dt / n

    # fine nodes and midpoints, one drive call for all of them
    step_h = np.repeat(h, n)
    starts = np.repeat(grid[:-1], n) + (np.arange(step_h.size) - np.repeat(np.cumsum(n) - n, n)) * step_h
    ends = starts + step_h
    ends[np.cumsum(n) - 1] = grid[1:]
    tt = np.concatenate([starts, starts + 0.5 * step_h, ends])
    F = np.asarray(drive(tt), dtype=float)
    if F.ndim == 0:
        F = np.full(tt.shape, float(F))
    squeeze = F.ndim == 1
    if squeeze:
        F = F[:, None]
    if not np.all(np.isfinite(F)):
        raise DomainError("drive is not finite on the integration grid")
    N = step_h.size
    F0, F1, F2 = F[:N], F[N : 2 * N], F[2 * N :]

    y0 = np.broadcast_to(np.asarray(y_init, dtype=float), (F.shape[1],)).astype(float)
    out = np.empty((grid.size, F.shape[1]))
    out[0] = y0

    # group intervals by substep size (equal up to rounding)
    key = np.round(h / h.max(), 9) if h.size else h
    boundaries = np.flatnonzero(np.diff(key) != 0) + 1
    seg_iv = np.split(np.arange(dt.size), boundaries)
    y = y0
    step_pos = 0
    for ivs in seg_iv:
        if ivs.size == 0:
            continue
        hs = float(np.mean(h[ivs]))
        P, q0, q1, q2 = _rk4_coefficients(hs, tau)
        m = int(n[ivs].sum())
        sl = slice(step_pos, step_pos + m)
        u = q0 * F0[sl] + q1 * F1[sl] + q2 * F2[sl]
        w, _ = lfilter([1.0], [1.0, -P], u, axis=0, zi=(P * y)[None, :])
        idx = np.cumsum(n[ivs]) - 1
        out[ivs + 1] = w[idx]
        y = w[-1]
        step_pos += m

    out = out[keep]
    if times[0] != 0.0:
        out = out[1:]
    return out[:, 0] if squeeze else out


def convolution_solve(drive: Callable, tau: float, y_init: float, times) -> np.ndarray:
    """Convolution-integral solution of ``tau y' = -y + drive(t)``.

    ``y(t) = y_init exp(-t/tau) + (1/tau) int_0^t exp(-(t-s)/tau) F(s) ds``
    by Simpson's rule on each panel.  Panel width is at most
    ``min(tau/30, dt/4)`` with ``dt`` the smallest grid spacing, the same
    resolution rule as :func:`relax_solve`, and the first panel is graded
    towards the origin as in :func:`graded_start`.  Cost is quadratic in the grid
    length.
    """
    times = np.asarray(times, dtype=float)
    _check_grid(tau, times)
    width = tau / STEPS_PER_TAU
    if times.size > 1:
        width = min(width, float(np.diff(times).min()) / 4.0)
    elif times[0] > 0:
        width = min(width, float(times[0]) / 4.0)
    out = np.empty(times.size)
    for j, t in enumerate(times):
        if t == 0.0:
            out[j] = y_init
            continue
        panels = max(1, math.ceil(t / width - 1e-9))
        # uniform panels merged with a mesh graded like (j/N)**4 towards the
        # origin, where power-law drives have unbounded derivatives
        u = np.linspace(0.0, 1.0, panels + 1)
        edges = np.union1d(t * u, t * u**4)
        edges, _ = graded_start(edges)
        a, b = edges[:-1], edges[1:]
        s = np.concatenate([a, 0.5 * (a + b), b])
        f = np.exp(-(t - s) / tau) * np.asarray(drive(s), dtype=float)
        m = a.size
        integral = float(np.sum((b - a) / 6.0 * (f[:m] + 4.0 * f[m : 2 * m] + f[2 * m :])))
        out[j] = y_init * math.exp(-t / tau) + integral / tau
    return out


# ---------------------------------------------------------------------------
# linker comparator
# ---------------------------------------------------------------------------


def linker_phi(N: int, S):
    """Fully occupied linker fraction ``S / (S**N + sum_n n S**(N-n))``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    S = np.asarray(S, dtype=float)
    if np.any(S < 0):
        raise DomainError("linker variable must be non-negative")
    den = S**N
    for n in range(1, N + 1):
        den = den + n * S ** (N - n)
    out = S / den
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LinkerModel:
    N: int
    A: float
    S0: float
    q: float
    k: float
    tau: float

    def S(self, t, dose: float):
        return self.S0 + self.q * dose * -np.expm1(-self.k * np.asarray(t, dtype=float))


def linker_ode(model: LinkerModel, dose: float, times) -> np.ndarray:
    """Trajectory of ``tau y' = -y + 1 + A [Phi_N(S_D(t)) - Phi_N(S0)]``, ``y(0) = 1``."""
    base = linker_phi(model.N, model.S0)

    def drive(t):
        return 1.0 + model.A * (linker_phi(model.N, model.S(t, dose)) - base)

    return relax_solve(drive, model.tau, 1.0, times)


# ---------------------------------------------------------------------------
# model families
# ---------------------------------------------------------------------------


def _block_names(kind: str, slot: int) -> list[str]:
    i = slot + 1
    if kind == HILL:
        return [f"A{i}", f"Kd{i}", f"h{i}"]
    return [f"a{i}", f"b{i}", f"c{i}"]


class ExpressionModel:
    """An expression embedded as a static or relaxation response model.

    ============  =====================================================
    embedding     model
    ============  =====================================================
    static        ``y = y0 + B E(R(t;k))``
    relax         ``tau y' = -y + y0 + B E(R(t;k))``, ``y(0) = y0``
    dose-ode      ``tau y' = -y + 1 + B E(R_D(t;k))``, ``y(0) = 1``
    ============  =====================================================

    For Hill-grammar expressions there is no global ``B``; each block
    carries its own amplitude, and the amplitudes of top-level blocks are
    treated as linear parameters.
    """

    def __init__(self, expr: Expression, embedding: str = STATIC, kind: str | None = None):
        if embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding {embedding!r}")
        kinds = {blk.kind for blk in blocks(expr)}
        if len(kinds) > 1:
            raise ValueError("mixed block kinds in one expression")
        self.expr = expr
        self.embedding = embedding
        self.kind = kinds.pop() if kinds else (kind or EML)
        self.n_blocks = len(blocks(expr))
        self.name = str(expr)

        glob = [] if embedding == DOSE_ODE else ["y0"]
        if self.kind == EML:
            glob.append("B")
        glob.append("k")
        if embedding != STATIC:
            glob.append("tau")
        names = list(glob)
        for slot in range(self.n_blocks):
            names += _block_names(self.kind, slot)
        self.param_names = tuple(names)

        linear = [] if embedding == DOSE_ODE else ["y0"]
        if self.kind == EML:
            linear.append("B")
            self._top_blocks = []
        else:
            self._top_blocks = [t for t in sum_terms(expr) if isinstance(t, Block)]
            linear += [f"A{t.slot + 1}" for t in self._top_blocks]
        self.linear_names = tuple(linear)
        self._n_glob = len(glob)
        self._compiled = compile_expr(expr)
        self._compiled_terms = {t.slot: compile_expr(t.child) for t in self._top_blocks}
        self._idx = {n: i for i, n in enumerate(self.param_names)}

    @property
    def depth(self) -> int:
        return measure(self.expr)[0]

    @property
    def nodes(self) -> int:
        return measure(self.expr)[1]

    def block_params(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float)[self._n_glob :]

    def _static_parts(self, theta, tt, dose):
        """Offset and columns (excluding the constant column) at times ``tt``."""
        theta = np.asarray(theta, dtype=float)
        R = recruitment_input(tt, theta[self._idx["k"]], dose)
        bp = self.block_params(theta)
        if self.kind == EML:
            E = self._compiled(bp, R)
            return np.zeros(R.shape), E[:, None]
        offset = np.zeros_like(R)
        cols = []
        for term in sum_terms(self.expr):
            if isinstance(term, Terminal):
                offset = offset + R
            elif isinstance(term, Block):
                i = PARAMS_PER_BLOCK * term.slot
                inner = self._compiled_terms[term.slot](bp, R)
                cols.append(hill_eval(1.0, bp[i + 1], bp[i + 2], inner))
        M = np.column_stack(cols) if cols else np.zeros((R.size, 0))
        return offset, M

    def design(self, theta, t, dose: float = 1.0):
        t = np.asarray(t, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if self.embedding == STATIC:
            offset, M = self._static_parts(theta, t, dose)
        else:
            tau = theta[self._idx["tau"]]

            def drive(tt):
                off, cols = self._static_parts(theta, tt, dose)
                return np.column_stack([off, cols])

            sol = relax_solve(drive, tau, 0.0, t)
            offset, M = sol[:, 0], sol[:, 1:]
            if self.embedding == DOSE_ODE:
                offset = offset + 1.0
        if self.embedding != DOSE_ODE:
            M = np.column_stack([np.ones(t.size), M])
        return offset, M

    def linear_index(self) -> np.ndarray:
        return np.array([self._idx[n] for n in self.linear_names], dtype=int)

    def predict(self, theta, t, dose: float = 1.0) -> np.ndarray:
        offset, M = self.design(theta, t, dose)
        return offset + M @ np.asarray(theta, dtype=float)[self.linear_index()]

    def initial_value(self, theta) -> float:
        """Declared model value at ``t = 0``."""
        return 1.0 if self.embedding == DOSE_ODE else float(theta[self._idx["y0"]])


class LinkerFamily:
    """Linker-occupancy comparator as a fittable family (dose-ODE embedding)."""

    embedding = DOSE_ODE
    linear_names = ("A",)
    default_bounds = {"A": (-1e7, 1e7), "S0": (1e-3, 100.0), "q": (1e-8, 1.0)}

    def __init__(self, N: int = 4):
        self.N = N
        self.name = f"Linker N={N}"
        self.param_names = ("A", "S0", "q", "k", "tau")

    def linear_index(self) -> np.ndarray:
        return np.array([0])

    def model(self, theta) -> LinkerModel:
        return LinkerModel(self.N, *map(float, theta))

    def design(self, theta, t, dose: float = 1.0):
        m = self.model(theta)
        base = linker_phi(self.N, m.S0)

        def drive(tt):
            return linker_phi(self.N, m.S(tt, dose)) - base

        col = relax_solve(drive, m.tau, 0.0, t)
        return np.ones(col.size), col[:, None]

    def predict(self, theta, t, dose: float = 1.0) -> np.ndarray:
        offset, M = self.design(theta, t, dose)
        return offset + M[:, 0] * float(theta[0])

    def initial_value(self, theta) -> float:
        return 1.0


def static_response(expr: Expression, theta, t, kind: str | None = None) -> np.ndarray:
    """Static response ``y0 + B E(R(t;k))`` (Hill: ``y0 + E(R(t;k))``).

    ``theta`` is either a full vector in :class:`ExpressionModel` order or a
    mapping from parameter name to value.
    """
    model = ExpressionModel(expr, STATIC, kind)
    if isinstance(theta, dict):
        theta = [theta[n] for n in model.param_names]
    return model.predict(theta, t)
