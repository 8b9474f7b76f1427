import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emlode.expr_core import (
    EML, HILL, R, Block, DomainError, GrammarConfig, Sum, canonicalize, compile_expr,
    canonicalize_with_params, enumerate_expressions, eval_expr, gate_eval, hill_eval,
    measure, n_blocks, parse, serialize,
)

from oracles import brute_force, key, parse_tuple

# counts per (max_depth, max_nodes) from the brute-force generator in oracles.py
FROZEN_COUNTS = {
    0: [1, 1, 2, 2, 3, 3, 4],
    1: [1, 2, 3, 5, 7, 10, 13],
    2: [1, 2, 4, 6, 11, 16, 26],
    3: [1, 2, 4, 7, 12, 21, 34],
}


# --- gate and Hill blocks ----------------------------------------------------


def test_gate_examples():
    assert gate_eval(0.5, 0.25, 1.0, 0.0) == 0.0
    assert gate_eval(1.0, 0.0, 0.0, 3.0) == pytest.approx(3.0)
    # (c + x)**a - b x - c**a with a = 2, b = 1, c = 1 at x = 1: 4 - 1 - 1
    assert gate_eval(2.0, 1.0, 1.0, 1.0) == pytest.approx(2.0)


@given(
    a=st.floats(1e-3, 100), b=st.floats(0, 10), c=st.floats(0, 100)
)
def test_gate_centered_at_zero(a, b, c):
    assert gate_eval(a, b, c, 0.0) == 0.0


def test_gate_domain():
    with pytest.raises(DomainError):
        gate_eval(0.5, 0.1, 0.1, np.array([0.0, -0.2]))
    assert gate_eval(0.5, 0.1, 0.0, 0.0) == 0.0  # boundary c + x = 0 allowed


def test_hill_examples():
    assert hill_eval(2.0, 0.5, 3.0, 0.5) == pytest.approx(1.0)
    assert hill_eval(2.0, 0.5, 3.0, 0.0) == 0.0
    # very large exponents stay finite
    assert hill_eval(1.0, 0.3, 30.0, np.array([0.1, 0.3, 1.0])) == pytest.approx([0.0, 0.5, 1.0], abs=1e-12)
    with pytest.raises(DomainError):
        hill_eval(1.0, 0.3, 2.0, -0.1)


@given(A=st.floats(0.1, 10), Kd=st.floats(1e-3, 10), h=st.floats(0.5, 30),
       x=st.floats(0.0, 100))
def test_hill_bounded(A, Kd, h, x):
    v = hill_eval(A, Kd, h, x)
    assert 0.0 <= v <= A * (1 + 1e-12)


# --- structure ---------------------------------------------------------------


def test_measure_and_text():
    e = parse("G(G(R)+R)")
    assert measure(e) == (2, 5)
    assert n_blocks(e) == 2
    assert serialize(e) == "G(G(R)+R)"
    assert measure(R) == (0, 1)
    assert measure(parse("H(R)+H(R)")) == (1, 5)


def test_parse_roundtrip_of_enumeration():
    for e in enumerate_expressions(GrammarConfig(EML, 3, 7)):
        assert parse(serialize(e)) == e


def test_parse_errors():
    for bad in ["", "G(R", "R+", "X(R)", "G(R))", "GR"]:
        with pytest.raises(ValueError):
            parse(bad)


def test_canonical_forms_agree():
    assert parse("R+G(R)") == parse("G(R)+R")
    assert parse("(R+G(R))+G(G(R))") == parse("G(G(R))+(G(R)+R)")
    assert parse("G(R+G(R))") == parse("G(G(R)+R)")


def test_slots_depth_first():
    e = parse("G(G(R)+R)+G(R)")
    slots = []

    def walk(n):
        if isinstance(n, Block):
            slots.append(n.slot)
            walk(n.child)
        elif isinstance(n, Sum):
            walk(n.left)
            walk(n.right)

    walk(e)
    assert slots == list(range(len(slots)))


def test_canonicalize_with_params_preserves_values():
    # R + G(x) with the gate in slot 0 and a nested gate at slot 1
    raw = Sum(R, Block(Sum(R, Block(R, EML, 1)), EML, 0))
    params = np.array([0.5, 0.2, 0.1, 1.3, 0.4, 0.2])
    x = np.linspace(0, 2, 9)
    canon, p2 = canonicalize_with_params(raw, params)
    assert canon == canonicalize(raw)
    np.testing.assert_allclose(eval_expr(canon, p2, x), eval_expr(raw, params, x), rtol=1e-14)


def test_eval_composition_oracle():
    # direct composition of the gate formula, written out by hand
    a1, b1, c1, a2, b2, c2 = 0.7, 0.3, 0.05, 1.8, 0.2, 0.4
    x = np.linspace(0, 1.5, 13)
    inner = (c2 + x) ** a2 - b2 * x - c2**a2
    s = inner + x
    expected = (c1 + s) ** a1 - b1 * s - c1**a1
    got = eval_expr(parse("G(G(R)+R)"), [a1, b1, c1, a2, b2, c2], x)
    np.testing.assert_allclose(got, expected, rtol=1e-13)


def test_eval_param_length_checked():
    with pytest.raises(ValueError):
        eval_expr(parse("G(G(R))"), [1.0, 0.0, 0.0], 1.0)


# --- enumeration -------------------------------------------------------------


def test_enumeration_count_depth2_nodes5():
    exprs = enumerate_expressions(GrammarConfig(EML, 2, 5))
    assert len(exprs) == 11
    assert {"R", "R+R", "G(R)", "G(R)+R", "G(G(R))", "G(G(R)+R)"} <= {str(e) for e in exprs}


@pytest.mark.parametrize("depth", range(4))
def test_enumeration_matches_frozen_counts(depth):
    for n in range(1, 8):
        assert len(enumerate_expressions(GrammarConfig(EML, depth, n))) == FROZEN_COUNTS[depth][n - 1]


@pytest.mark.parametrize("depth,nodes", [(d, n) for d in range(4) for n in range(1, 8)])
def test_enumeration_matches_brute_force(depth, nodes):
    ours = {key(parse_tuple(str(e))) for e in enumerate_expressions(GrammarConfig(EML, depth, nodes))}
    assert ours == brute_force(depth, nodes)


def test_enumeration_unique_canonical_and_within_limits():
    cfg = GrammarConfig(HILL, 3, 7)
    exprs = enumerate_expressions(cfg)
    assert len(set(exprs)) == len(exprs)
    for e in exprs:
        assert canonicalize(e) == e
        d, n = measure(e)
        assert d <= 3 and n <= 7
        assert "G" not in str(e)


def test_enumeration_sorted_and_deterministic():
    a = enumerate_expressions(GrammarConfig(EML, 3, 5))
    b = enumerate_expressions(GrammarConfig(EML, 3, 5))
    assert [str(e) for e in a] == [str(e) for e in b]
    keys = [(measure(e)[1], measure(e)[0], str(e)) for e in a]
    assert keys == sorted(keys)


def test_grammar_config_validation():
    with pytest.raises(ValueError):
        GrammarConfig("X", 2, 5)
    with pytest.raises(ValueError):
        GrammarConfig(EML, -1, 5)
    with pytest.raises(ValueError):
        GrammarConfig(EML, 2, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(1, 7), st.data())
def test_random_rebracketing_is_canonical(depth, nodes, data):
    exprs = enumerate_expressions(GrammarConfig(EML, depth, nodes))
    e = data.draw(st.sampled_from(exprs))
    # rebuild with sums reversed: canonical form must not change
    def flip(n):
        if isinstance(n, Block):
            return Block(flip(n.child), n.kind, 0)
        if isinstance(n, Sum):
            return Sum(flip(n.right), flip(n.left))
        return n

    assert canonicalize(flip(e)) == e
    assert math.isfinite(measure(e)[1])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["G", "H"]), st.integers(0, 10_000))
def test_compiled_evaluator_bitwise(kind, seed):
    rng = np.random.default_rng(seed)
    exprs = enumerate_expressions(GrammarConfig(kind, 3, 6))
    e = exprs[seed % len(exprs)]
    params = rng.uniform(0.05, 2.0, 3 * n_blocks(e))
    x = np.linspace(0, 3, 17)
    try:
        expected = eval_expr(e, params, x)
    except DomainError:
        with pytest.raises(DomainError):
            compile_expr(e)(params, x)
        return
    assert compile_expr(e)(params, x).tobytes() == expected.tobytes()
