"""Centered gate cascade used as a fixed temporal basis with a linear readout.

Layer ``k`` obeys ``tau_k z_k' = -z_k + G_k(z_{k-1})`` with ``z_0 = R(t)``
and a deterministic schedule for the gate parameters and timescales.  Only
the readout ``beta_0 + sum_j beta_j z_j`` is fitted; the two reservoir
hyperparameters (input rate and base timescale) come from a grid search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .expr_core import DomainError
from .fitting import FitResult, Split, Trace
from .response_models import graded_start, substeps
from .selection import aic_bic, cascade_params

K_FIT_GRID = np.linspace(0.15, 0.80, 18)
TAU0_GRID = np.linspace(0.5, 5.5, 20)
READOUT_JITTER = 1e-10


def gate_schedule(k: int, tau0: float = 1.0) -> tuple[float, float, float, float]:
    """Fixed ``(a_k, b_k, c_k, tau_k)`` of layer ``k`` (1-based)."""
    if k < 1:
        raise ValueError("layer index starts at 1")
    a = 0.45 + 0.035 * (k - 1)
    b = 1.00 if k == 1 else 0.42 - 0.015 * min(k - 1, 10)
    c = 1e-6 if k == 1 else 0.08
    tau = tau0 * (1.0 + 0.55 * (k - 1))
    return a, b, c, tau


@dataclass(frozen=True)
class CascadeSpec:
    K: int
    k_fit: float
    tau0: float

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if not (self.k_fit > 0 and self.tau0 > 0):
            raise ValueError("k_fit and tau0 must be positive")

    def layers(self) -> np.ndarray:
        """``(K, 4)`` array of ``(a, b, c, tau)`` rows."""
        return np.array([gate_schedule(k, self.tau0) for k in range(1, self.K + 1)]).reshape(self.K, 4)


@dataclass
class Readout:
    beta: np.ndarray
    rank_deficient: bool = False

    def predict(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(len(states), -1)
        return self.beta[0] + states[:, : self.beta.size - 1] @ self.beta[1:]


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def _gate_drive(a, b, c):
    ca = c**a

    def drive(prev):
        base = c + prev
        if not base.min(initial=np.inf) >= 0:
            bad = np.argwhere(base < 0)[0]
            raise DomainError(f"layer {bad[-1] + 1}: c + z_prev < 0 ({base[tuple(bad)]:.3g})")
        return base**a - b * prev - ca

    return drive


def _integrate(input_fn: Callable, drive: Callable, taus, times, z_init) -> np.ndarray:
    """RK4 for the triangular system ``tau_k z_k' = -z_k + drive(z_{k-1})_k``.

    ``input_fn(t)`` returns the ``(batch,)`` layer-0 signal; ``z_init`` has
    shape ``(batch, K)``.  Returns ``(batch, len(times), K)``; the system
    starts at ``t = 0``.
    """
    taus = np.asarray(taus, dtype=float)
    times = np.asarray(times, dtype=float)
    z = np.array(z_init, dtype=float)
    batch, K = z.shape
    out = np.empty((batch, times.size, K))
    if K == 0:
        return out
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and strictly increasing")

    def f(t, z):
        prev = np.concatenate([input_fn(t)[:, None], z[:, :-1]], axis=1)
        return (drive(prev) - z) / taus

    grid = times if times[0] == 0.0 else np.concatenate([[0.0], times])
    grid, keep = graded_start(grid)
    first = 0 if times[0] == 0.0 else 1
    # slot of each refined grid point in the output, -1 when not reported
    slot = np.full(grid.size, -1)
    slot[keep[first:]] = np.arange(times.size)
    if first == 0:
        out[:, 0] = z
    n = substeps(np.diff(grid), float(taus.min()))
    for i in range(grid.size - 1):
        t0, h = grid[i], (grid[i + 1] - grid[i]) / n[i]
        for j in range(n[i]):
            t = t0 + j * h
            k1 = f(t, z)
            k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = f(t + h, z + h * k3)
            z = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if slot[i + 1] >= 0:
            out[:, slot[i + 1]] = z
    return out


def cascade_simulate(
    spec: CascadeSpec,
    times,
    input_fn: Callable | None = None,
    z_init=None,
) -> np.ndarray:
    """States ``z_1..z_K`` on ``times`` as an ``(n_times, K)`` array.

    The default input is ``R(t) = 1 - exp(-k_fit t)`` with all states
    starting at zero.  ``input_fn`` maps a scalar time to the layer-0 value.
    """
    L = spec.layers()
    if input_fn is None:
        k_fit = spec.k_fit
        inp = lambda t: np.array([-math.expm1(-k_fit * t)])  # noqa: E731
    else:
        inp = lambda t: np.array([float(input_fn(t))])  # noqa: E731
    z0 = np.zeros((1, spec.K)) if z_init is None else np.asarray(z_init, dtype=float).reshape(1, spec.K)
    if spec.K == 0:
        return np.zeros((len(times), 0))
    return _integrate(inp, _gate_drive(L[:, 0], L[:, 1], L[:, 2]), L[:, 3], times, z0)[0]


def simulate_batch(k_fits: Sequence[float], tau0: float, K: int, times) -> np.ndarray:
    """States for several input rates sharing one base timescale: ``(n_k, n_times, K)``."""
    L = CascadeSpec(K, 1.0, tau0).layers()
    k_fits = np.asarray(k_fits, dtype=float)
    inp = lambda t: -np.expm1(-k_fits * t)  # noqa: E731
    return _integrate(inp, _gate_drive(L[:, 0], L[:, 1], L[:, 2]), L[:, 3], times, np.zeros((k_fits.size, K)))


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------


def _design(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=float).reshape(len(states), -1)
    return np.column_stack([np.ones(len(states)), states])


REFINE_STEPS = 3


def _normal_solve(A: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares ``min |A beta - rhs|`` through jittered normal equations.

    Columns are scaled to unit norm so the ``1e-10`` jitter is relative to a
    unit diagonal.  A few steps of iterative refinement against the
    unjittered residual remove the bias the jitter would otherwise leave on
    ill-conditioned but full-rank systems.  When the smallest eigenvalue of
    the scaled Gram matrix is at or below the jitter, the system is treated
    as rank deficient and the minimum-norm solution is returned.
    """
    norms = np.sqrt(np.sum(A * A, axis=0))
    if A.shape[1] == 0:
        return np.zeros(0), False
    if np.any(norms == 0.0):
        return np.linalg.lstsq(A, rhs, rcond=None)[0], True
    An = A / norms
    G = An.T @ An
    eig = np.linalg.eigvalsh(G)
    if eig[0] <= READOUT_JITTER * eig[-1]:
        return np.linalg.lstsq(A, rhs, rcond=None)[0], True
    G[np.diag_indices_from(G)] += READOUT_JITTER
    chol = cho_factor(G)
    x = cho_solve(chol, An.T @ rhs)
    for _ in range(REFINE_STEPS):
        x = x + cho_solve(chol, An.T @ (rhs - An @ x))
    return x / norms, False


def fit_readout(states, trace: Trace, split: Split | None = None) -> tuple[Readout, FitResult]:
    """Weighted linear least squares for ``beta_0..beta_K`` on training points.

    Solved through the normal equations with a ``1e-10`` relative jitter on
    the diagonal (see :func:`_normal_solve`); a system singular at that
    level falls back to the minimum-norm solution and is flagged.
    """
    split = split or trace.split
    X = _design(states)
    K = X.shape[1] - 1
    w = 1.0 / trace.sigma
    Xw, yw = X * w[:, None], trace.y * w
    tr_idx = split.train
    beta, rank_deficient = _normal_solve(Xw[tr_idx], yw[tr_idx])
    readout = Readout(beta, rank_deficient)
    r = yw - Xw @ beta
    chi2 = float(np.sum(r[tr_idx] ** 2))
    hold = float(np.mean(r[split.hold] ** 2))
    names = tuple(f"beta{j}" for j in range(K + 1))
    fit = FitResult(
        model_name=f"cascade K={K}",
        param_names=names,
        theta=beta,
        chi2_train=chi2,
        n_train=tr_idx.size,
        n_hold=split.hold.size,
        wmse_train=chi2 / tr_idx.size,
        wmse_hold=hold,
        n_params=cascade_params(K),
        starts_tried=1,
        best_start=0,
        converged=not rank_deficient,
        bound_hits={},
    )
    return readout, fit


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class CascadeResult:
    spec: CascadeSpec
    readout: Readout
    fit: FitResult
    aic: float
    bic: float

    @property
    def K(self) -> int:
        return self.spec.K


@dataclass
class GridSearchResult:
    best: dict[int, CascadeResult]
    k_grid: np.ndarray
    tau_grid: np.ndarray
    hold_wmse: np.ndarray = field(repr=False)  # (n_tau, n_k, n_K)
    K_values: tuple[int, ...] = ()


def _pick(scores: np.ndarray, k_grid: np.ndarray, tau_grid: np.ndarray) -> tuple[int, int]:
    """Indices ``(i_tau, i_k)`` of the least score; ties go to the lowest
    ``k_fit`` value, then the lowest ``tau0`` value."""
    it, ik = np.nonzero(scores == np.min(scores))
    order = np.lexsort((tau_grid[it], k_grid[ik]))
    return int(it[order[0]]), int(ik[order[0]])


def reservoir_grid_search(
    trace: Trace,
    K_values: Sequence[int] = tuple(range(1, 11)),
    k_grid=K_FIT_GRID,
    tau_grid=TAU0_GRID,
) -> GridSearchResult:
    """For each depth ``K``, the ``(k_fit, tau0)`` grid point with least hold wMSE.

    Ties go to the lowest ``k_fit``, then the lowest ``tau0``.  States of the
    deepest cascade are simulated once per grid point; shallower readouts use
    their leading columns, which equal the shallower cascades exactly.
    """
    K_values = tuple(sorted(set(int(k) for k in K_values)))
    if not K_values or K_values[0] < 1:
        raise ValueError("K_values must be positive depths")
    k_grid = np.asarray(k_grid, dtype=float)
    tau_grid = np.asarray(tau_grid, dtype=float)
    Kmax = K_values[-1]
    w = 1.0 / trace.sigma
    tr, ho = trace.split.train, trace.split.hold
    yw = trace.y * w
    scores = np.full((tau_grid.size, k_grid.size, len(K_values)), np.inf)

    for it, tau0 in enumerate(tau_grid):
        states = simulate_batch(k_grid, tau0, Kmax, trace.t)
        for ik in range(k_grid.size):
            Xw = _design(states[ik]) * w[:, None]
            for iK, K in enumerate(K_values):
                beta = _normal_solve(Xw[tr, : K + 1], yw[tr])[0]
                r = yw[ho] - Xw[ho, : K + 1] @ beta
                scores[it, ik, iK] = float(np.mean(r * r))

    best = {}
    for iK, K in enumerate(K_values):
        it, ik = _pick(scores[:, :, iK], k_grid, tau_grid)
        spec = CascadeSpec(K, float(k_grid[ik]), float(tau_grid[it]))
        states = cascade_simulate(spec, trace.t)
        readout, fit = fit_readout(states, trace)
        aic, bic = aic_bic(fit.chi2_train, fit.n_train, fit.n_params)
        best[K] = CascadeResult(spec, readout, fit, aic, bic)
    return GridSearchResult(best, k_grid, tau_grid, scores, K_values)


# ---------------------------------------------------------------------------
# linear response
# ---------------------------------------------------------------------------


class PoleError(ValueError):
    """Transfer function evaluated at one of its poles."""


@dataclass(frozen=True)
class LinearResponse:
    working_point: np.ndarray  # z*_0 .. z*_{K-1}
    gains: np.ndarray
    taus: np.ndarray


def gate_derivative(a: float, b: float, c: float, z) -> np.ndarray:
    return a * (c + np.asarray(z, dtype=float)) ** (a - 1.0) - b


def steady_state(spec: CascadeSpec, R_star: float) -> np.ndarray:
    """Fixed point ``z*_0..z*_K`` for a constant input ``R_star``."""
    z = [float(R_star)]
    for a, b, c, _ in spec.layers():
        z.append((c + z[-1]) ** a - b * z[-1] - c**a)
    return np.array(z)


def linear_response(spec: CascadeSpec, working_point) -> LinearResponse:
    """Gains ``g_k = a_k (c_k + z*_{k-1})**(a_k - 1) - b_k`` at a working point."""
    wp = np.asarray(working_point, dtype=float)[: spec.K]
    L = spec.layers()
    g = np.array([gate_derivative(a, b, c, z) for (a, b, c, _), z in zip(L, wp)])
    return LinearResponse(wp, g, L[:, 3].copy())


def transfer_function(lr: LinearResponse, s):
    """``H_K(s) = prod_k g_k / (1 + s tau_k)``."""
    den = 1.0 + s * lr.taus
    if np.any(den == 0):
        raise PoleError(f"s={s} is a pole (s = -1/tau_k)")
    return np.prod(lr.gains / den)


def simulate_linearized(lr: LinearResponse, delta_input: Callable, times) -> np.ndarray:
    """Deviations ``delta z_1..delta z_K`` of the linearized cascade, starting at zero."""
    g = lr.gains
    inp = lambda t: np.array([float(delta_input(t))])  # noqa: E731
    return _integrate(inp, lambda prev: g * prev, lr.taus, times, np.zeros((1, g.size)))[0]
