"""Synthetic stand-ins for the published recruitment traces.

The processed experimental traces are not bundled.  These generators produce
data with the same layout so every pipeline can run end to end:

* four single-trace panels drawn from ``G(G(R)+R)`` with realistic
  parameter magnitudes (121 points over 60 min, SEM 2% of the peak);
* a two-dose pair (doses 2 and 20) from the four-site linker model, with a
  sustained low-dose rise and a transient high-dose peak.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .expr_core import parse
from .fitting import Trace
from .response_models import LinkerModel, linker_ode, static_response
from .toybench import gaussian_noise

PANEL_TIMES = np.linspace(0.0, 60.0, 121)
DOSE_TIMES = np.linspace(0.0, 60.0, 121)
NOISE_FRACTION = 0.02

# y0, B, k, outer gate (a, b, c), inner gate (a, b, c)
PANEL_PARAMS = {
    "a": (3.82, 165.0, 0.205, 0.110, 0.0378, 0.0207, 71.2, 4.5e-6, 0.042),
    "b": (-1.37, 221.0, 0.213, 0.506, 0.868, 1.8e-8, 74.9, 0.765, 3.3e-5),
    "c": (0.005, 745.0, 0.211, 0.966, 0.947, 1e-12, 54.5, 1.1e-6, 0.025),
    "d": (-0.949, 86.2, 0.188, 0.481, 0.475, 6.6e-10, 36.1, 0.664, 0.037),
}
PANEL_EXPR = "G(G(R)+R)"

DOSE_MODEL = LinkerModel(N=4, A=12.0, S0=0.2, q=0.08, k=0.08, tau=3.0)
DOSES = (2.0, 20.0)
DOSE_SEM = 0.02


def panel_trace(params, seed: int, label: str = "", times=PANEL_TIMES,
                noise_fraction: float = NOISE_FRACTION) -> tuple[Trace, np.ndarray]:
    """Noisy ``G(G(R)+R)`` trace and its noise-free curve."""
    times = np.asarray(times, dtype=float)
    y_true = static_response(parse(PANEL_EXPR), params, times)
    sigma = noise_fraction * float(np.max(np.abs(y_true)))
    y = y_true + gaussian_noise(times.size, sigma, seed)
    return Trace(times, y, np.full(times.size, sigma), label=label), y_true


def panel_traces(seed: int = 1) -> list[Trace]:
    return [panel_trace(p, seed + i, label=name)[0] for i, (name, p) in enumerate(PANEL_PARAMS.items())]


def dose_traces(seed: int = 1, model: LinkerModel = DOSE_MODEL, doses=DOSES,
                times=DOSE_TIMES, sem: float = DOSE_SEM) -> list[Trace]:
    out = []
    for i, dose in enumerate(doses):
        y = linker_ode(model, dose, times) + gaussian_noise(len(times), sem, seed + i)
        out.append(Trace(times, y, np.full(len(times), sem), label=f"{dose:g}", dose=dose))
    return out


def write_standins(directory: str | Path, seed: int = 1) -> list[Path]:
    """Write one CSV per panel plus the two-dose file; return the paths."""
    from .dataio import write_trace_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for tr in panel_traces(seed):
        p = directory / f"panel_{tr.label}.csv"
        write_trace_csv(p, [tr])
        paths.append(p)
    p = directory / "two_dose.csv"
    write_trace_csv(p, dose_traces(seed))
    paths.append(p)
    return paths
