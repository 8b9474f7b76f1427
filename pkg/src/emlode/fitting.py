"""Weighted least-squares fitting of response models to traces.

The fitter works in two layers.  Parameters a model declares as linear
(baselines and amplitudes) are solved exactly by weighted linear least
squares for every trial point of the remaining nonlinear parameters.  The
nonlinear parameters are searched by bounded Nelder-Mead from a fixed
Sobol sequence of starts and each simplex optimum is polished by a bounded
trust-region least-squares step.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, lsq_linear, minimize
from scipy.stats import qmc

from .expr_core import DomainError

log = logging.getLogger(__name__)

DEFAULT_N_STARTS = 32
DEFAULT_N_POLISH = 1
HOLD_EVERY = 4
HOLD_OFFSET = 3

# keyed by parameter name with the block index stripped
DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "a": (1e-3, 100.0),
    "b": (0.0, 10.0),
    "c": (0.0, 100.0),
    "A": (-1e3, 1e3),
    "Kd": (1e-4, 10.0),
    "h": (0.5, 30.0),
    "k": (1e-3, 10.0),
    "tau": (1e-2, 1e3),
    "y0": (-1e2, 1e2),
    "B": (-1e3, 1e3),
}

_LOG0_FLOOR = 1e-9


# ---------------------------------------------------------------------------
# traces and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    hold: np.ndarray
    rule: str


def split_train_hold(n_points: int, every: int = HOLD_EVERY, offset: int = HOLD_OFFSET) -> Split:
    """Hold out every ``every``-th point starting at ``offset`` (0-based)."""
    if n_points < every:
        raise ValueError(f"need at least {every} points for the hold-out rule")
    if not 0 <= offset < every:
        raise ValueError("offset must lie in [0, every)")
    idx = np.arange(n_points)
    hold = idx[idx % every == offset]
    train = idx[idx % every != offset]
    return Split(train, hold, f"hold_every_{every}_offset_{offset}")


def floor_sems(sem, y=None) -> tuple[np.ndarray, float]:
    """Floor SEMs at a quarter of the median positive SEM.

    Missing (NaN) entries count as zero.  When no entry is positive the
    floor falls back to ``0.05 * median(|y|)``.
    """
    sem = np.nan_to_num(np.asarray(sem, dtype=float), nan=0.0)
    pos = sem[sem > 0]
    if pos.size:
        floor = 0.25 * float(np.median(pos))
    else:
        if y is None:
            raise ValueError("no positive SEM and no observations for the fallback floor")
        floor = 0.05 * float(np.median(np.abs(np.asarray(y, dtype=float))))
        if not floor > 0:
            raise ValueError("fallback SEM floor is zero")
    return np.maximum(sem, floor), floor


@dataclass
class Trace:
    """One observed time series with floored weights and a train/hold split."""

    t: np.ndarray
    y: np.ndarray
    sem: np.ndarray
    label: str = ""
    dose: float = 1.0
    every: int = HOLD_EVERY
    offset: int = HOLD_OFFSET
    sigma: np.ndarray = field(init=False)
    sigma_floor: float = field(init=False)
    floor_fallback: bool = field(init=False)
    split: Split = field(init=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.sem = np.asarray(self.sem, dtype=float)
        if not (self.t.shape == self.y.shape == self.sem.shape) or self.t.ndim != 1:
            raise ValueError("t, y and sem must be 1-D arrays of equal length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError(f"trace {self.label!r}: times must be strictly increasing")
        self.floor_fallback = not np.any(np.nan_to_num(self.sem) > 0)
        self.sigma, self.sigma_floor = floor_sems(self.sem, self.y)
        self.split = split_train_hold(self.t.size, self.every, self.offset)

    def __len__(self):
        return self.t.size


def wmse(residuals, sigma, index) -> float:
    """Mean squared weighted residual over ``index``."""
    index = np.asarray(index)
    if index.size == 0:
        raise ValueError("empty index set")
    r = np.asarray(residuals, dtype=float)[index] / np.asarray(sigma, dtype=float)[index]
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def _base_name(name: str) -> str:
    return name.rstrip("0123456789")


def default_bounds(model, overrides: Mapping[str, tuple[float, float]] | None = None):
    """Bounds for every parameter of ``model``.

    Lookup order: exact name in ``overrides``, base name in ``overrides``,
    the model's own ``default_bounds``, then :data:`DEFAULT_BOUNDS`.
    """
    overrides = dict(overrides or {})
    own = getattr(model, "default_bounds", {}) or {}
    out = {}
    for name in model.param_names:
        base = _base_name(name)
        for table, key in (
            (overrides, name), (overrides, base), (own, name), (DEFAULT_BOUNDS, name), (DEFAULT_BOUNDS, base)
        ):
            if key in table:
                lo, hi = map(float, table[key])
                break
        else:
            raise KeyError(f"no bounds for parameter {name!r}")
        if not lo < hi:
            raise ValueError(f"bounds for {name!r} must satisfy lo < hi")
        out[name] = (lo, hi)
    return out


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model_name: str
    param_names: tuple[str, ...]
    theta: np.ndarray
    chi2_train: float
    n_train: int
    n_hold: int
    wmse_train: float
    wmse_hold: float
    n_params: int
    starts_tried: int
    best_start: int
    converged: bool
    bound_hits: dict[str, str]
    feasible: bool = True

    @property
    def params(self) -> dict[str, float]:
        return dict(zip(self.param_names, map(float, self.theta)))


def derive_seed(global_seed: int, name: str) -> int:
    """Per-candidate seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{int(global_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


class _Problem:
    def __init__(self, model, traces: Sequence[Trace], bounds):
        self.model = model
        self.traces = list(traces)
        self.names = list(model.param_names)
        self.lin = np.asarray(model.linear_index(), dtype=int)
        self.nl = np.array([i for i in range(len(self.names)) if i not in set(self.lin)], dtype=int)
        self.lo = np.array([bounds[n][0] for n in self.names])
        self.hi = np.array([bounds[n][1] for n in self.names])
        self._lin_lo, self._lin_hi = self.lo[self.lin], self.hi[self.lin]
        self._w = [1.0 / tr.sigma[tr.split.train] for tr in self.traces]
        self.size = sum(w.size for w in self._w)
        self.scale = []
        for i in self.nl:
            lo, hi = self.lo[i], self.hi[i]
            if lo > 0 and hi / lo >= 100:
                self.scale.append("log")
            elif lo == 0 and hi > 0:
                self.scale.append("log0")
            else:
                self.scale.append("lin")
        self._prepare_scales()

    # unit cube <-> nonlinear parameters
    def _prepare_scales(self):
        lo, hi = self.lo[self.nl], self.hi[self.nl]
        kind = np.array(self.scale)
        self._is_lin = kind == "lin"
        with np.errstate(divide="ignore", invalid="ignore"):
            # exp(start + u * span) for the two logarithmic scales
            self._start = np.where(kind == "log", np.log(lo), np.log(hi) + np.log(_LOG0_FLOOR))
            self._span = np.where(kind == "log", np.log(hi / lo), -np.log(_LOG0_FLOOR))
        self._start[self._is_lin] = 0.0
        self._span[self._is_lin] = 0.0
        self._lo_nl, self._width = lo, hi - lo

    def from_unit(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        return np.where(self._is_lin, self._lo_nl + self._width * u, np.exp(self._start + u * self._span))

    def to_unit(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = (np.log(np.maximum(x, 1e-300)) - self._start) / np.where(self._span > 0, self._span, 1.0)
            u = np.where(self._is_lin, (x - self._lo_nl) / self._width, lg)
        return np.clip(u, 0.0, 1.0)

    def profile(self, x_nl):
        """Full parameter vector and weighted train residuals for given nonlinear values."""
        theta = np.zeros(len(self.names))
        theta[self.nl] = x_nl
        if len(self.traces) == 1:
            # the full grid is evaluated so that domain checks cover held-out times
            tr = self.traces[0]
            offset, M = self.model.design(theta, tr.t, tr.dose)
            idx, w = tr.split.train, self._w[0]
            r = (tr.y[idx] - offset[idx]) * w
            M = M[idx] * w[:, None]
        else:
            rows_r, rows_M = [], []
            for tr, w in zip(self.traces, self._w):
                offset, M = self.model.design(theta, tr.t, tr.dose)
                idx = tr.split.train
                rows_r.append((tr.y[idx] - offset[idx]) * w)
                rows_M.append(M[idx] * w[:, None])
            r = np.concatenate(rows_r)
            M = np.vstack(rows_M)
        if not np.isfinite(r.sum() + M.sum()):
            raise DomainError("non-finite model output")
        if self.lin.size:
            beta = self._solve_linear(M, r)
            theta[self.lin] = beta
            r = r - M @ beta
        return theta, r

    def _solve_linear(self, M, r):
        lo, hi = self._lin_lo, self._lin_hi
        if M.shape[1] <= 2:
            return _box_lsq_small(M.T @ M, M.T @ r, lo, hi)
        try:
            beta = np.linalg.solve(M.T @ M, M.T @ r)
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(M, r, rcond=None)[0]
        if (beta >= lo).all() and (beta <= hi).all():
            return beta
        return lsq_linear(M, r, bounds=(lo, hi), method="bvls").x

    def chi2(self, x_nl) -> float:
        try:
            with np.errstate(all="ignore"):
                _, r = self.profile(x_nl)
        except (DomainError, FloatingPointError, np.linalg.LinAlgError, ValueError):
            return np.inf
        val = float(r @ r)
        return val if np.isfinite(val) else np.inf

    def residuals_safe(self, x_nl, size):
        try:
            with np.errstate(all="ignore"):
                _, r = self.profile(x_nl)
            if np.all(np.isfinite(r)):
                return r
        except (DomainError, FloatingPointError, np.linalg.LinAlgError, ValueError):
            pass
        return np.full(size, 1e8)


def _box_lsq_small(G: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Minimize ``x.G.x - 2 g.x`` over a box for one or two variables.

    The unconstrained optimum is used when it lies in the box; otherwise
    the optimum of a convex quadratic lies on an edge, and each edge is a
    one-dimensional problem solved by clipping.
    """
    m = g.size
    if m == 1:
        x = g[0] / G[0, 0] if G[0, 0] > 0 else 0.0
        return np.array([min(max(x, lo[0]), hi[0])])
    a, b, d = float(G[0, 0]), float(G[0, 1]), float(G[1, 1])
    g0, g1 = float(g[0]), float(g[1])
    det = a * d - b * b
    if det > 1e-14 * a * d:
        x0, x1 = (d * g0 - b * g1) / det, (a * g1 - b * g0) / det
        if lo[0] <= x0 <= hi[0] and lo[1] <= x1 <= hi[1]:
            return np.array([x0, x1])

    def clip(v, i):
        return min(max(v, lo[i]), hi[i])

    best, best_f = None, np.inf
    for x0 in (lo[0], hi[0]):
        x1 = clip((g1 - b * x0) / d if d > 0 else 0.0, 1)
        cand = (x0, x1)
        f = a * x0 * x0 + 2 * b * x0 * x1 + d * x1 * x1 - 2 * (g0 * x0 + g1 * x1)
        if f < best_f:
            best, best_f = cand, f
    for x1 in (lo[1], hi[1]):
        x0 = clip((g0 - b * x1) / a if a > 0 else 0.0, 0)
        f = a * x0 * x0 + 2 * b * x0 * x1 + d * x1 * x1 - 2 * (g0 * x0 + g1 * x1)
        if f < best_f:
            best, best_f = (x0, x1), f
    return np.array(best)


def _simplex(prob: _Problem, u0, maxfev: int):
    """Bounded Nelder-Mead in the unit cube from ``u0``."""
    d = prob.nl.size
    if not np.isfinite(prob.chi2(prob.from_unit(u0))):
        return None
    res = minimize(
        lambda u: prob.chi2(prob.from_unit(u)),
        u0,
        method="Nelder-Mead",
        bounds=[(0.0, 1.0)] * d,
        options={"maxfev": maxfev, "xatol": 1e-6, "fatol": 1e-9, "adaptive": d > 4},
    )
    x = prob.from_unit(res.x)
    val = prob.chi2(x)
    if not np.isfinite(val):
        return None
    return x, val, bool(res.success)


def _polish(prob: _Problem, x, val, converged, max_nfev: int):
    """Bounded trust-region least-squares refinement of a simplex optimum."""
    lo, hi = prob.lo[prob.nl], prob.hi[prob.nl]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pol = least_squares(
                lambda v: prob.residuals_safe(v, prob.size),
                np.clip(x, lo, hi),
                bounds=(lo, hi),
                method="trf",
                x_scale="jac",
                max_nfev=max_nfev,
            )
    except (ValueError, np.linalg.LinAlgError):
        return x, val, converged
    cand = prob.chi2(pol.x)
    if cand < val:
        return pol.x, cand, converged or pol.status > 0
    return x, val, converged


def evaluate(model, theta, traces: Sequence[Trace]) -> list[np.ndarray]:
    """Model predictions on each trace's full grid."""
    return [model.predict(theta, tr.t, tr.dose) for tr in traces]


def score_fit(model, theta, traces: Sequence[Trace]) -> tuple[float, int, float, int]:
    """``(chi2_train, n_train, wmse_hold, n_hold)`` pooled over traces."""
    chi2, n_train, hold_sq, n_hold = 0.0, 0, 0.0, 0
    for tr, yhat in zip(traces, evaluate(model, theta, traces)):
        r = (tr.y - yhat) / tr.sigma
        chi2 += float(np.sum(r[tr.split.train] ** 2))
        hold_sq += float(np.sum(r[tr.split.hold] ** 2))
        n_train += tr.split.train.size
        n_hold += tr.split.hold.size
    return chi2, n_train, hold_sq / n_hold, n_hold


def _bound_hits(names, theta, lo, hi) -> dict[str, str]:
    hits = {}
    for n, v, a, b in zip(names, theta, lo, hi):
        tol = 1e-6 * (b - a)
        if v - a <= tol:
            hits[n] = "lo"
        elif b - v <= tol:
            hits[n] = "hi"
    return hits


def fit_model(
    model,
    traces: Trace | Sequence[Trace],
    bounds: Mapping[str, tuple[float, float]] | None = None,
    n_starts: int = DEFAULT_N_STARTS,
    seed: int = 0,
    maxfev: int | None = None,
    n_polish: int = DEFAULT_N_POLISH,
) -> FitResult:
    """Best local optimum of the weighted training chi-square over ``n_starts`` starts.

    Multiple traces share one parameter vector and their chi-squares add.
    Starts are the first ``n_starts`` points of a scrambled Sobol sequence
    seeded by ``seed``, so a larger ``n_starts`` only adds starts.  Every
    start runs a Nelder-Mead simplex (``maxfev`` evaluations, default
    ``100 * d``); a start is then polished when its simplex optimum ranks among
    the ``n_polish`` best of the starts up to and including it.
    """
    if isinstance(traces, Trace):
        traces = [traces]
    full_bounds = default_bounds(model)
    full_bounds.update(bounds or {})
    full_bounds = default_bounds(model, full_bounds)
    prob = _Problem(model, traces, full_bounds)
    d = prob.nl.size
    n_train = sum(tr.split.train.size for tr in traces)
    n_hold = sum(tr.split.hold.size for tr in traces)

    if d == 0:
        runs = [(np.zeros(0), prob.chi2(np.zeros(0)), True)]
        starts_tried = 1
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            U = qmc.Sobol(d, scramble=True, seed=seed).random(n_starts)
        maxfev = maxfev or 100 * d
        runs = [_simplex(prob, u, maxfev) for u in U]
        starts_tried = len(U)
        # Polish a start when its simplex optimum ranks among the n_polish best
        # of the starts so far.  The decision only looks back, so adding starts
        # never un-polishes an earlier one and the best chi-square can only drop.
        seen: list[float] = []
        for i, run in enumerate(runs):
            if run is None:
                continue
            rank = sum(v <= run[1] for v in seen)
            seen.append(run[1])
            if rank < n_polish:
                runs[i] = _polish(prob, *run, max_nfev=40 * (d + 1))

    best_i, best = None, None
    for i, run in enumerate(runs):
        if run is None or not np.isfinite(run[1]):
            continue
        if best is None or run[1] < best[1]:
            best_i, best = i, run
    names = tuple(model.param_names)
    p = len(names)
    if best is None:
        log.info("all %d starts infeasible for %s", starts_tried, model.name)
        return FitResult(
            model.name, names, np.full(p, np.nan), np.inf, n_train, n_hold, np.inf, np.inf,
            p, starts_tried, -1, False, {}, feasible=False,
        )
    theta, _ = prob.profile(best[0])
    chi2, n_train, wmse_hold, n_hold = score_fit(model, theta, traces)
    return FitResult(
        model_name=model.name,
        param_names=names,
        theta=theta,
        chi2_train=chi2,
        n_train=n_train,
        n_hold=n_hold,
        wmse_train=chi2 / n_train,
        wmse_hold=wmse_hold,
        n_params=p,
        starts_tried=starts_tried,
        best_start=best_i,
        converged=best[2],
        bound_hits=_bound_hits(names, theta, prob.lo, prob.hi),
    )
