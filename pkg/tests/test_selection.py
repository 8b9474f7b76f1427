import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emlode.expr_core import parse
from emlode.fitting import FitResult
from emlode.selection import (
    ModelReportRow, ScoreConfig, aic_bic, cascade_params, count_params, rank_models,
    report_row, validation_score,
)


def test_aic_bic_examples():
    # published chi-squares are rounded, so allow one unit
    aic, bic = aic_bic(6.9, 91, 9)
    assert abs(aic + 216) <= 1 and abs(bic + 194) <= 1
    aic, bic = aic_bic(51367, 181, 5)
    assert abs(aic - 1032) <= 1 and abs(bic - 1048) <= 1
    aic, bic = aic_bic(91.0, 91, 4)
    assert aic == pytest.approx(8.0) and bic == pytest.approx(4 * math.log(91))


def test_aic_bic_edges():
    assert aic_bic(0.0, 10, 3) == (-math.inf, -math.inf)
    assert aic_bic(math.inf, 10, 3) == (math.inf, math.inf)
    with pytest.raises(ValueError):
        aic_bic(-1.0, 10, 3)
    with pytest.raises(ValueError):
        aic_bic(1.0, 0, 3)


@given(st.floats(1e-3, 1e6), st.integers(1, 1000), st.integers(0, 50))
def test_aic_minus_bic(chi2, n, p):
    aic, bic = aic_bic(chi2, n, p)
    assert aic - bic == pytest.approx(p * (2 - math.log(n)), abs=1e-7 * max(1.0, abs(aic)))


def test_count_params():
    assert count_params("G(R)") == 6
    assert count_params("G(G(R)+R)") == 9
    assert count_params("H(R)") == 5
    assert count_params("H(R)+H(R)") == 8
    assert count_params("G(R)+G(R)", embedding="dose-ode") == 9
    assert count_params("G(R)", embedding="relax") == 7
    assert count_params("R", grammar="H") == 2
    assert [cascade_params(K) for K in (1, 6, 10)] == [4, 9, 13]
    with pytest.raises(ValueError):
        count_params("G(R)", embedding="other")


def test_count_params_matches_model():
    from emlode.response_models import EMBEDDINGS, ExpressionModel

    for text in ["R", "G(R)", "G(G(R)+R)", "H(R)+H(R)", "H(H(R))+R"]:
        for emb in EMBEDDINGS:
            grammar = "H" if "H" in text else "G"
            assert count_params(text, grammar, emb) == len(ExpressionModel(parse(text), emb).param_names)


def _fit(chi2, hold, p, n=91, feasible=True):
    return FitResult("m", tuple(f"x{i}" for i in range(p)), np.zeros(p), chi2, n, 30,
                     chi2 / n, hold, p, 1, 0, True, {}, feasible)


def test_validation_score_penalties():
    e = parse("G(G(R)+R)")
    f = _fit(10.0, 0.5, 9)
    assert validation_score(f, e) == 0.5
    assert validation_score(f, e, ScoreConfig(0.1, 0.01)) == pytest.approx(0.5 + 0.2 + 0.05)
    assert validation_score(_fit(10.0, 0.5, 9, feasible=False), e) == math.inf
    with pytest.raises(ValueError):
        ScoreConfig(-1.0, 0.0)


def test_rank_models_order_and_deltas():
    rows = [
        report_row(_fit(20.0, 0.30, 6), parse("G(R)")),
        report_row(_fit(7.0, 0.20, 9), parse("G(G(R)+R)")),
        report_row(_fit(9.0, 0.20, 8), parse("G(G(R))+R")),
        report_row(_fit(math.inf, math.inf, 3, feasible=False), parse("R")),
    ]
    ranked = rank_models(rows)
    # equal scores break by p, so the 8-parameter model comes first
    assert [r.expression for r in ranked] == ["G(G(R))+R", "G(G(R)+R)", "G(R)", "R"]
    finite = [r for r in ranked if math.isfinite(r.aic)]
    assert min(r.d_aic for r in finite) == 0.0
    assert all(r.d_aic >= 0 for r in finite)
    for r in finite:
        assert r.aic - r.bic == pytest.approx(r.p * (2 - math.log(r.n_train)))
    assert math.isnan(ranked[-1].d_aic)
    with pytest.raises(ValueError):
        rank_models([])
    assert isinstance(ranked[0], ModelReportRow)
