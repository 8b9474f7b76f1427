"""Held-out scoring, information criteria, parameter counting and ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

from .expr_core import EML, Expression, blocks, measure, parse
from .fitting import FitResult
from .response_models import DOSE_ODE, EMBEDDINGS, STATIC


@dataclass(frozen=True)
class ScoreConfig:
    lambda_depth: float = 0.0
    lambda_nodes: float = 0.0

    def __post_init__(self):
        if self.lambda_depth < 0 or self.lambda_nodes < 0:
            raise ValueError("penalty weights must be non-negative")


def validation_score(fit: FitResult, e: Expression, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Held-out wMSE plus the optional depth and node penalties."""
    if not fit.feasible or not math.isfinite(fit.wmse_hold):
        return math.inf
    depth, nodes = measure(e)
    score = fit.wmse_hold
    if cfg.lambda_depth:
        score += cfg.lambda_depth * depth
    if cfg.lambda_nodes:
        score += cfg.lambda_nodes * nodes
    return score


def aic_bic(chi2: float, n_train: int, p: int) -> tuple[float, float]:
    """``N ln(chi2/N) + 2p`` and ``N ln(chi2/N) + p ln N``.

    A zero chi-square gives ``(-inf, -inf)``; check with :func:`math.isinf`.
    """
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if chi2 < 0:
        raise ValueError("chi2 must be non-negative")
    if chi2 == 0:
        return -math.inf, -math.inf
    if math.isinf(chi2):
        return math.inf, math.inf
    base = n_train * math.log(chi2 / n_train)
    return base + 2 * p, base + p * math.log(n_train)


def count_params(e: Expression | str, grammar: str = EML, embedding: str = STATIC) -> int:
    """Number of fitted parameters of an expression under a grammar and embedding.

    EML: ``y0, B, k`` plus three per gate; Hill: ``y0, k`` plus three per
    block (the amplitude lives in the block).  Relaxation embeddings add
    ``tau``; the dose-ODE embedding fixes the baseline at 1, dropping ``y0``.
    """
    if isinstance(e, str):
        e = parse(e)
    if embedding not in EMBEDDINGS:
        raise ValueError(f"unknown embedding {embedding!r}")
    kinds = {b.kind for b in blocks(e)}
    kind = kinds.pop() if kinds else grammar
    p = 3 if kind == EML else 2
    if embedding != STATIC:
        p += 1
    if embedding == DOSE_ODE:
        p -= 1
    return p + 3 * len(blocks(e))


def cascade_params(K: int) -> int:
    """Readout ``beta_0..beta_K`` plus the two grid-searched reservoir hyperparameters."""
    return K + 3


@dataclass
class ModelReportRow:
    expression: str
    p: int
    chi2_train: float
    n_train: int
    wmse_train: float
    wmse_hold: float
    score: float
    aic: float
    bic: float
    nodes: int = 0
    d_aic: float = math.nan
    d_bic: float = math.nan
    bound_flags: dict[str, str] = field(default_factory=dict)
    fit: FitResult | None = field(default=None, repr=False, compare=False)


def report_row(fit: FitResult, e: Expression, cfg: ScoreConfig = ScoreConfig()) -> ModelReportRow:
    aic, bic = aic_bic(fit.chi2_train, fit.n_train, fit.n_params) if fit.feasible else (math.inf, math.inf)
    return ModelReportRow(
        expression=str(e),
        p=fit.n_params,
        chi2_train=fit.chi2_train,
        n_train=fit.n_train,
        wmse_train=fit.wmse_train,
        wmse_hold=fit.wmse_hold,
        score=validation_score(fit, e, cfg),
        aic=aic,
        bic=bic,
        nodes=measure(e)[1],
        bound_flags=dict(fit.bound_hits),
        fit=fit,
    )


def rank_models(rows: Iterable[ModelReportRow]) -> list[ModelReportRow]:
    """Sort by score, then ``p``, node count and expression text; fill AIC/BIC deltas.

    Deltas are relative to the row with the smallest AIC.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to rank")
    ranked = sorted(rows, key=lambda r: (r.score, r.p, r.nodes, r.expression))
    finite = [r for r in ranked if math.isfinite(r.aic)]
    ref = min(finite, key=lambda r: r.aic) if finite else None
    out = []
    for r in ranked:
        if ref is None or not math.isfinite(r.aic):
            out.append(replace(r, d_aic=math.nan, d_bic=math.nan))
        else:
            out.append(replace(r, d_aic=r.aic - ref.aic, d_bic=r.bic - ref.bic))
    return out
