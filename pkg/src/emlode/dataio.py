"""Trace files, run configuration, report writing and run manifests.

Trace CSV contract: UTF-8, header ``t,y,sem`` with an optional ``label``
column.  Rows may come in any order; each label becomes one trace sorted by
time.  Empty ``sem`` fields are allowed and trigger the fallback weight
floor.  A numeric label doubles as the dose for the dose-ODE embedding.

Run configuration is an INI file.  Every section and key is listed in
:data:`CONFIG_SCHEMA`; anything else is rejected before computing.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .fitting import DEFAULT_N_POLISH, DEFAULT_N_STARTS, HOLD_EVERY, HOLD_OFFSET, Trace
from .response_models import EMBEDDINGS, STATIC
from .toybench import BENCH_N_POINTS, BENCH_T_END, NetworkParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4

SUBCOMMANDS = ("search", "cascade-bench", "toybench")
GRAMMARS = {"eml": "G", "hill": "H"}


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (exit code 2)."""


class DataError(ValueError):
    """Unreadable or malformed input data (exit code 3)."""


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _dose(label: str) -> float:
    try:
        d = float(label)
    except ValueError:
        return 1.0
    return d if math.isfinite(d) and d > 0 else 1.0


def ingest_trace(
    path: str | Path, every: int = HOLD_EVERY, offset: int = HOLD_OFFSET
) -> list[Trace]:
    """Read a trace CSV into one :class:`Trace` per label.

    Labels are ordered numerically where possible, then as text.

    Raises
    ------
    DataError
        On a missing file, a bad header, a malformed row (with its line
        number) or repeated time points within one label.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    if header[:3] != ["t", "y", "sem"] or len(header) > 4 or (len(header) == 4 and header[3] != "label"):
        raise DataError(f"{path}:1: header must be t,y,sem[,label], got {','.join(header)}")

    rows: dict[str, list[tuple[float, float, float]]] = {}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            t = float(row[0])
            y = float(row[1])
            sem = float(row[2]) if row[2].strip() else math.nan
        except ValueError:
            raise DataError(f"{path}:{line}: non-numeric value in {row[:3]}") from None
        if not (math.isfinite(t) and math.isfinite(y)):
            raise DataError(f"{path}:{line}: t and y must be finite")
        if sem < 0:
            raise DataError(f"{path}:{line}: negative sem")
        label = row[3].strip() if len(header) == 4 else ""
        rows.setdefault(label, []).append((t, y, sem))
    if not rows:
        raise DataError(f"{path}: no data rows")

    traces = []
    for label in sorted(rows, key=_label_key):
        arr = np.array(sorted(rows[label]), dtype=float)
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise DataError(f"{path}: label {label!r} has repeated time points")
        try:
            traces.append(
                Trace(arr[:, 0], arr[:, 1], arr[:, 2], label=label, dose=_dose(label),
                      every=every, offset=offset)
            )
        except ValueError as exc:
            raise DataError(f"{path}: label {label!r}: {exc}") from exc
    return traces


def write_trace_csv(path: str | Path, traces: Sequence[Trace]) -> None:
    rows = []
    for tr in traces:
        for t, y, s in zip(tr.t, tr.y, tr.sem):
            rows.append([fmt(t), fmt(y), "" if not np.isfinite(s) else fmt(s), tr.label])
    write_csv(path, ["t", "y", "sem", "label"], rows)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def fmt(x: Any) -> str:
    """Deterministic text form for report cells."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".12g")
    return str(x)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def safe_name(label: str) -> str:
    s = re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_")
    return s or "trace"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    subcommand: str = "search"
    inputs: tuple[str, ...] = ()
    grammar: str = "eml"
    max_depth: int = 2
    max_nodes: int = 5
    embedding: str = STATIC
    doses: tuple[float, ...] = ()
    hold_every: int = HOLD_EVERY
    hold_offset: int = HOLD_OFFSET
    lambda_depth: float = 0.0
    lambda_nodes: float = 0.0
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_starts: int = DEFAULT_N_STARTS
    n_polish: int = DEFAULT_N_POLISH
    seed: int = 0
    jobs: int = 1
    out: str = "results"
    # cascade benchmark
    k_values: tuple[int, ...] = tuple(range(1, 11))
    k_fit_grid: tuple[float, float, int] = (0.15, 0.80, 18)
    tau0_grid: tuple[float, float, int] = (0.5, 5.5, 20)
    # toy network
    t_end: float = BENCH_T_END
    n_points: int = BENCH_N_POINTS
    network: NetworkParams = field(default_factory=NetworkParams)

    def validate(self) -> "RunConfig":
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.grammar not in GRAMMARS:
            raise ConfigError(f"grammar must be one of {sorted(GRAMMARS)}, got {self.grammar!r}")
        if self.embedding not in EMBEDDINGS:
            raise ConfigError(f"embedding must be one of {list(EMBEDDINGS)}, got {self.embedding!r}")
        if self.max_depth < 0 or self.max_nodes < 1:
            raise ConfigError("max_depth must be >= 0 and max_nodes >= 1")
        if self.hold_every < 2 or not 0 <= self.hold_offset < self.hold_every:
            raise ConfigError("need hold_every >= 2 and 0 <= hold_offset < hold_every")
        if self.lambda_depth < 0 or self.lambda_nodes < 0:
            raise ConfigError("penalty weights must be non-negative")
        if self.n_starts < 1 or self.n_polish < 0 or self.jobs < 1:
            raise ConfigError("n_starts and jobs must be >= 1, n_polish >= 0")
        if any(d <= 0 for d in self.doses):
            raise ConfigError("doses must be positive")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ConfigError(f"bounds for {name!r} need lo < hi")
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("k_values must be positive depths")
        for name in ("k_fit_grid", "tau0_grid"):
            lo, hi, n = getattr(self, name)
            if not (0 < lo <= hi and n >= 1):
                raise ConfigError(f"{name} needs 0 < lo <= hi and n >= 1")
        if not (self.t_end > 0 and self.n_points >= self.hold_every):
            raise ConfigError("t_end must be positive and n_points >= hold_every")
        if self.subcommand == "search" and not self.inputs:
            raise ConfigError("search needs at least one input file")
        return self


_NETWORK_KEYS = {f.name: f.type for f in fields(NetworkParams)}

# section -> key -> RunConfig attribute
CONFIG_SCHEMA: dict[str, dict[str, str]] = {
    "run": {"subcommand": "subcommand", "seed": "seed", "jobs": "jobs", "out": "out"},
    "data": {"inputs": "inputs", "hold_every": "hold_every", "hold_offset": "hold_offset",
             "doses": "doses"},
    "grammar": {"kind": "grammar", "max_depth": "max_depth", "max_nodes": "max_nodes"},
    "model": {"embedding": "embedding"},
    "score": {"lambda_depth": "lambda_depth", "lambda_nodes": "lambda_nodes"},
    "fit": {"n_starts": "n_starts", "n_polish": "n_polish"},
    "cascade": {"k_values": "k_values", "k_fit_grid": "k_fit_grid", "tau0_grid": "tau0_grid"},
    "toybench": {"t_end": "t_end", "n_points": "n_points", **{k: k for k in _NETWORK_KEYS}},
}


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in re.split(r"[,\n]", text) if p.strip()]


def _parse_value(attr: str, text: str, base: Path | None) -> Any:
    if attr in ("seed", "jobs", "max_depth", "max_nodes", "hold_every", "hold_offset",
                "n_starts", "n_polish", "n_points"):
        return int(text)
    if attr in ("lambda_depth", "lambda_nodes", "t_end"):
        return float(text)
    if attr == "inputs":
        paths = _split_list(text)
        if base is not None:
            paths = [str(p if Path(p).is_absolute() else (base / p).resolve()) for p in paths]
        return tuple(paths)
    if attr == "doses":
        return tuple(float(x) for x in _split_list(text))
    if attr == "k_values":
        m = re.fullmatch(r"\s*(\d+)\s*-\s*(\d+)\s*", text)
        if m:
            return tuple(range(int(m.group(1)), int(m.group(2)) + 1))
        return tuple(int(x) for x in _split_list(text))
    if attr in ("k_fit_grid", "tau0_grid"):
        parts = _split_list(text)
        if len(parts) != 3:
            raise ValueError("expected lo, hi, n")
        return float(parts[0]), float(parts[1]), int(parts[2])
    return text.strip()


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read an INI run configuration on top of ``base`` (defaults if omitted).

    Relative input paths are resolved against the config file's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (e.g. K_A)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    cfg = replace(base or RunConfig())
    net = {}
    for section in parser.sections():
        if section == "bounds":
            bounds = dict(cfg.bounds)
            for key, text in parser.items(section):
                try:
                    lo, hi = (float(x) for x in _split_list(text))
                except ValueError:
                    raise ConfigError(f"{path}: [bounds] {key} needs 'lo, hi'") from None
                bounds[key] = (lo, hi)
            cfg.bounds = bounds
            continue
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, text in parser.items(section):
            attr = CONFIG_SCHEMA[section].get(key)
            if attr is None:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                if section == "toybench" and key in _NETWORK_KEYS:
                    net[key] = int(text) if key in ("n_A", "n_I", "seed") else float(text)
                else:
                    setattr(cfg, attr, _parse_value(attr, text, path.parent))
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {exc}") from None
    if net:
        try:
            cfg.network = replace(cfg.network, **net)
        except ValueError as exc:
            raise ConfigError(f"{path}: [toybench] {exc}") from None
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Resolved configuration as INI text that :func:`load_config` reads back.

    The output directory is left out so a manifest can be replayed anywhere.
    """
    lines = [
        "[run]",
        f"subcommand = {cfg.subcommand}",
        f"seed = {cfg.seed}",
        f"jobs = {cfg.jobs}",
        "",
        "[data]",
        f"inputs = {', '.join(cfg.inputs)}",
        f"hold_every = {cfg.hold_every}",
        f"hold_offset = {cfg.hold_offset}",
        f"doses = {', '.join(fmt(d) for d in cfg.doses)}",
        "",
        "[grammar]",
        f"kind = {cfg.grammar}",
        f"max_depth = {cfg.max_depth}",
        f"max_nodes = {cfg.max_nodes}",
        "",
        "[model]",
        f"embedding = {cfg.embedding}",
        "",
        "[score]",
        f"lambda_depth = {fmt(cfg.lambda_depth)}",
        f"lambda_nodes = {fmt(cfg.lambda_nodes)}",
        "",
        "[fit]",
        f"n_starts = {cfg.n_starts}",
        f"n_polish = {cfg.n_polish}",
        "",
        "[bounds]",
        *(f"{k} = {fmt(lo)}, {fmt(hi)}" for k, (lo, hi) in sorted(cfg.bounds.items())),
        "",
        "[cascade]",
        f"k_values = {', '.join(str(k) for k in cfg.k_values)}",
        f"k_fit_grid = {', '.join(fmt(v) for v in cfg.k_fit_grid)}",
        f"tau0_grid = {', '.join(fmt(v) for v in cfg.tau0_grid)}",
        "",
        "[toybench]",
        f"t_end = {fmt(cfg.t_end)}",
        f"n_points = {cfg.n_points}",
        *(f"{k} = {fmt(getattr(cfg.network, k))}" for k in _NETWORK_KEYS),
        "",
    ]
    return "\n".join(lines)


def write_manifest(path: str | Path, cfg: RunConfig, outputs: Sequence[str] = ()) -> None:
    """Replayable config with content hashes of the inputs as leading comments."""
    head = ["# run manifest; replay with: emlode <subcommand> --config <this file> --out DIR"]
    for p in cfg.inputs:
        head.append(f"# sha256 {sha256_file(p)}  {p}")
    for name in outputs:
        head.append(f"# output {name}")
    Path(path).write_text("\n".join(head) + "\n\n" + config_text(cfg), encoding="utf-8")
