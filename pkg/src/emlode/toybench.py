"""Fifty-state activation/adaptation network used as ground truth for the cascade.

Two branches are driven by ``R(t) = 1 - exp(-k_R t)``: a fast activation
chain ``A_1..A_nA`` and a slow inhibitory chain ``I_1..I_nI``.  The output is
a saturating function of the terminal activation state minus a saturating
function of the terminal inhibitory state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fitting import Trace
from .response_models import substeps

BENCH_T_END = 60.0
BENCH_N_POINTS = 241


def benchmark_times(t_end: float = BENCH_T_END, n_points: int = BENCH_N_POINTS) -> np.ndarray:
    return np.linspace(0.0, t_end, n_points)


@dataclass(frozen=True)
class NetworkParams:
    n_A: int = 20
    n_I: int = 30
    k_R: float = 0.45
    kon_A: float = 2.4
    koff_A: float = 0.55
    tau_A: float = 0.28
    kon_I: float = 0.75
    koff_I: float = 0.08
    tau_I: float = 0.75
    A_amp: float = 1.6
    I_amp: float = 1.25
    K_A: float = 0.18
    K_I: float = 0.22
    y0: float = 0.0
    sigma_noise: float = 0.015
    seed: int = 1

    def __post_init__(self):
        if self.n_A < 1 or self.n_I < 1:
            raise ValueError("chain lengths must be >= 1")
        for name in ("k_R", "kon_A", "koff_A", "tau_A", "kon_I", "koff_I", "tau_I"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")


@dataclass
class NetworkTrajectory:
    t: np.ndarray
    R: np.ndarray
    A: np.ndarray  # (n_times, n_A)
    I: np.ndarray  # (n_times, n_I)
    y_true: np.ndarray


def _rhs(p: NetworkParams, t: float, x: np.ndarray) -> np.ndarray:
    R = -math.expm1(-p.k_R * t)
    A, I = x[: p.n_A], x[p.n_A :]
    dA = np.empty_like(A)
    dI = np.empty_like(I)
    dA[0] = p.kon_A * R * (1.0 - A[0]) - p.koff_A * A[0]
    dI[0] = p.kon_I * R * (1.0 - I[0]) - p.koff_I * I[0]
    dA[1:] = (A[:-1] - A[1:]) / p.tau_A
    dI[1:] = (I[:-1] - I[1:]) / p.tau_I
    return np.concatenate([dA, dI])


def network_output(p: NetworkParams, A_term, I_term):
    A_term = np.asarray(A_term, dtype=float)
    I_term = np.asarray(I_term, dtype=float)
    return p.y0 + p.A_amp * A_term / (p.K_A + A_term) - p.I_amp * I_term / (p.K_I + I_term)


def simulate_network(p: NetworkParams = NetworkParams(), times=None) -> NetworkTrajectory:
    """Fixed-step RK4 integration of the network from the all-zero state."""
    times = benchmark_times() if times is None else np.asarray(times, dtype=float)
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and strictly increasing")
    # fastest relaxation time of the system sets the step rule
    tau_min = min(p.tau_A, p.tau_I, 1.0 / (p.kon_A + p.koff_A), 1.0 / (p.kon_I + p.koff_I))
    grid = times if times[0] == 0.0 else np.concatenate([[0.0], times])
    n = substeps(np.diff(grid), tau_min)
    x = np.zeros(p.n_A + p.n_I)
    states = [x]
    for i in range(grid.size - 1):
        h = (grid[i + 1] - grid[i]) / n[i]
        for j in range(n[i]):
            t = grid[i] + j * h
            k1 = _rhs(p, t, x)
            k2 = _rhs(p, t + 0.5 * h, x + 0.5 * h * k1)
            k3 = _rhs(p, t + 0.5 * h, x + 0.5 * h * k2)
            k4 = _rhs(p, t + h, x + h * k3)
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states.append(x)
    X = np.array(states)
    if grid is not times:
        X = X[1:]
    A, I = X[:, : p.n_A], X[:, p.n_A :]
    R = -np.expm1(-p.k_R * times)
    return NetworkTrajectory(times, R, A, I, network_output(p, A[:, -1], I[:, -1]))


def gaussian_noise(n: int, sigma: float, seed: int) -> np.ndarray:
    """``n`` i.i.d. normal draws from Philox-4x64 uniforms via Box-Muller.

    The counter-based generator and the explicit transform make the stream
    reproducible across platforms for a given seed.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    m = (n + 1) // 2
    bits = np.random.Philox(seed).random_raw(2 * m).astype(np.uint64)
    # 53-bit uniforms in (0, 1]
    u = ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u1, u2 = u[:m], u[m:]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2.0 * np.pi * u2), rad * np.sin(2.0 * np.pi * u2)])
    return sigma * z[:n]


def add_noise(y_true, sigma_noise: float, seed: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=float)
    if sigma_noise == 0:
        return y_true.copy()
    return y_true + gaussian_noise(y_true.size, sigma_noise, seed)


def benchmark_trace(p: NetworkParams = NetworkParams(), times=None) -> tuple[Trace, NetworkTrajectory]:
    """Noisy observation trace with constant SEM ``sigma_noise`` and its ground truth."""
    traj = simulate_network(p, times)
    y_obs = add_noise(traj.y_true, p.sigma_noise, p.seed)
    sem = np.full(traj.t.size, p.sigma_noise if p.sigma_noise > 0 else np.nan)
    return Trace(traj.t, y_obs, sem, label="toybench"), traj
