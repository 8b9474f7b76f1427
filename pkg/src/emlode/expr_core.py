"""Expression trees for the restricted gate grammar ``E ::= R | G(E) | E+E``.

Trees are immutable.  Block nodes carry a kind (``"G"`` for the centered EML
gate, ``"H"`` for the Hill block) and a slot index into a flat parameter
vector holding three numbers per block.  Canonical trees have their sums
flattened, sorted, re-bracketed to the left, and their slots numbered
depth-first, left-to-right.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

EML = "G"
HILL = "H"
BLOCK_KINDS = (EML, HILL)
PARAMS_PER_BLOCK = 3


class DomainError(ValueError):
    """Raised when a block is evaluated outside its domain."""


@dataclass(frozen=True)
class Terminal:
    def __str__(self) -> str:
        return "R"


@dataclass(frozen=True)
class Block:
    child: "Expression"
    kind: str = EML
    slot: int = 0

    def __str__(self) -> str:
        return f"{self.kind}({self.child})"


@dataclass(frozen=True)
class Sum:
    left: "Expression"
    right: "Expression"

    def __str__(self) -> str:
        return f"{self.left}+{self.right}"


Expression = Union[Terminal, Block, Sum]

R = Terminal()


@dataclass(frozen=True)
class GrammarConfig:
    kind: str = EML
    max_depth: int = 2
    max_nodes: int = 5

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")


# ---------------------------------------------------------------------------
# block evaluation
# ---------------------------------------------------------------------------


def gate_eval(a, b, c, x):
    """Centered EML gate ``(c + x)**a - b*x - c**a``.

    Works on scalars and arrays.  ``G(0) == 0`` exactly.

    Raises
    ------
    DomainError
        If ``c + x < 0`` anywhere.
    """
    x = np.asarray(x, dtype=float)
    base = c + x
    if not base.min(initial=np.inf) >= 0:
        raise DomainError(f"gate base c + x < 0 (c={c!r})")
    # (c + 0)**a - b*0 - c**a is exactly 0 in floating point
    out = base**a - b * x - c**a
    return out if out.ndim else float(out)


def hill_eval(A, Kd, h, x):
    """Hill recruitment block ``A x**h / (Kd**h + x**h)``."""
    x = np.asarray(x, dtype=float)
    if not x.min(initial=np.inf) >= 0:
        raise DomainError("Hill block evaluated at negative input")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        # x**h / (Kd**h + x**h) written in ratio form to avoid overflow for large h
        ratio = (Kd / np.where(x > 0, x, 1.0)) ** h
        out = np.where(x > 0, A / (1.0 + ratio), 0.0)
    return out if out.ndim else float(out)


def block_eval(kind: str, p: Sequence[float], x):
    if kind == EML:
        return gate_eval(p[0], p[1], p[2], x)
    if kind == HILL:
        return hill_eval(p[0], p[1], p[2], x)
    raise ValueError(f"unknown block kind {kind!r}")


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------


def measure(e: Expression) -> tuple[int, int]:
    """Return ``(depth, nodes)``: block nesting depth and total node count."""
    if isinstance(e, Terminal):
        return 0, 1
    if isinstance(e, Block):
        d, n = measure(e.child)
        return d + 1, n + 1
    dl, nl = measure(e.left)
    dr, nr = measure(e.right)
    return max(dl, dr), nl + nr + 1


def n_blocks(e: Expression) -> int:
    if isinstance(e, Terminal):
        return 0
    if isinstance(e, Block):
        return 1 + n_blocks(e.child)
    return n_blocks(e.left) + n_blocks(e.right)


def blocks(e: Expression) -> list[Block]:
    """Block nodes in depth-first, left-to-right order."""
    if isinstance(e, Terminal):
        return []
    if isinstance(e, Block):
        return [e] + blocks(e.child)
    return blocks(e.left) + blocks(e.right)


def block_kinds(e: Expression) -> set[str]:
    return {blk.kind for blk in blocks(e)}


def sum_terms(e: Expression) -> list[Expression]:
    """Flatten nested sums into their list of non-sum terms."""
    if isinstance(e, Sum):
        return sum_terms(e.left) + sum_terms(e.right)
    return [e]


def _order_key(e: Expression) -> tuple:
    # Blocks sort before sums before the terminal, so "G(R)+R" is the
    # canonical spelling.  Sum children are never sums in canonical trees.
    if isinstance(e, Block):
        return (0, e.kind, _order_key(e.child))
    if isinstance(e, Sum):
        return (1, tuple(_order_key(t) for t in sum_terms(e)))
    return (2,)


def _strip(e: Expression) -> Expression:
    """Canonical structure with all slots zeroed."""
    if isinstance(e, Terminal):
        return e
    if isinstance(e, Block):
        return Block(_strip(e.child), e.kind, 0)
    terms = sorted((_strip(t) for t in sum_terms(e)), key=_order_key)
    return _fold(terms)


def _fold(terms: Sequence[Expression]) -> Expression:
    out = terms[0]
    for t in terms[1:]:
        out = Sum(out, t)
    return out


def _number(e: Expression, start: int = 0) -> tuple[Expression, int]:
    if isinstance(e, Terminal):
        return e, start
    if isinstance(e, Block):
        child, nxt = _number(e.child, start + 1)
        return Block(child, e.kind, start), nxt
    left, nxt = _number(e.left, start)
    right, nxt = _number(e.right, nxt)
    return Sum(left, right), nxt


def canonicalize(e: Expression) -> Expression:
    """Canonical representative of ``e`` under sum commutativity/associativity."""
    out, _ = _number(_strip(e))
    return out


def canonicalize_with_params(e: Expression, params) -> tuple[Expression, np.ndarray]:
    """Canonicalize ``e`` and permute its parameter vector to the new slot layout."""
    params = np.asarray(params, dtype=float)

    def tagged(node):
        # carry the original slot through canonical sorting via a side table
        if isinstance(node, Terminal):
            return node, ()
        if isinstance(node, Block):
            child, order = tagged(node.child)
            return Block(child, node.kind, 0), (node.slot,) + order
        parts = [tagged(t) for t in sum_terms(node)]
        parts.sort(key=lambda p: _order_key(p[0]))
        order: tuple = ()
        for _, o in parts:
            order += o
        return _fold([p[0] for p in parts]), order

    # sorting stripped subtrees keeps the DFS order of original slots aligned
    stripped, old_slots = tagged(e)
    canon, _ = _number(_strip(stripped))
    new = np.concatenate(
        [params[PARAMS_PER_BLOCK * s : PARAMS_PER_BLOCK * (s + 1)] for s in old_slots]
    ) if old_slots else np.zeros(0)
    return canon, new


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def eval_expr(e: Expression, params, x):
    """Evaluate ``e`` at input ``x`` (scalar or array).

    ``params`` is the flat vector with three entries per block slot.
    """
    params = np.asarray(params, dtype=float)
    nb = max((blk.slot for blk in blocks(e)), default=-1) + 1
    if params.size < PARAMS_PER_BLOCK * nb:
        raise ValueError(
            f"{e} needs {PARAMS_PER_BLOCK * nb} parameters, got {params.size}"
        )
    return _eval(e, params, x)


def _eval(e, params, x):
    if isinstance(e, Terminal):
        return x
    if isinstance(e, Block):
        i = PARAMS_PER_BLOCK * e.slot
        return block_eval(e.kind, params[i : i + PARAMS_PER_BLOCK], _eval(e.child, params, x))
    return _eval(e.left, params, x) + _eval(e.right, params, x)


def compile_expr(e: Expression) -> Callable:
    """Evaluator ``f(params, x)`` equivalent to :func:`eval_expr` without checks
    on the parameter count.

    The tree is walked once into nested closures, which removes the per-call
    dispatch cost inside optimizer loops.  Arithmetic is identical to
    :func:`gate_eval` and :func:`hill_eval`, so results agree bit for bit.
    """
    if isinstance(e, Terminal):
        return lambda p, x: x
    if isinstance(e, Sum):
        left, right = compile_expr(e.left), compile_expr(e.right)
        return lambda p, x: left(p, x) + right(p, x)
    child = compile_expr(e.child)
    i = PARAMS_PER_BLOCK * e.slot
    if e.kind == HILL:
        return lambda p, x: hill_eval(p[i], p[i + 1], p[i + 2], child(p, x))

    def gate(p, x):
        v = child(p, x)
        a, b, c = p[i], p[i + 1], p[i + 2]
        base = c + v
        if not base.min(initial=np.inf) >= 0:
            raise DomainError(f"gate base c + x < 0 (c={c!r})")
        return base**a - b * v - c**a

    return gate


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------


def serialize(e: Expression) -> str:
    return str(e)


def parse(text: str) -> Expression:
    """Parse the text form (``"G(G(R)+R)"``) into a canonical tree."""
    s = text.replace(" ", "")
    pos = 0

    def expr():
        nonlocal pos
        terms = [atom()]
        while pos < len(s) and s[pos] == "+":
            pos += 1
            terms.append(atom())
        return _fold(terms)

    def atom():
        nonlocal pos
        if pos < len(s) and s[pos] == "R":
            pos += 1
            return R
        if pos < len(s) and s[pos] == "(":
            pos += 1
            inner = expr()
            _expect(")")
            return inner
        if pos < len(s) and s[pos] in BLOCK_KINDS:
            kind = s[pos]
            pos += 1
            _expect("(")
            inner = expr()
            _expect(")")
            return Block(inner, kind)
        raise ValueError(f"cannot parse {text!r} at position {pos}")

    def _expect(ch):
        nonlocal pos
        if pos >= len(s) or s[pos] != ch:
            raise ValueError(f"cannot parse {text!r}: expected {ch!r} at {pos}")
        pos += 1

    out = expr()
    if pos != len(s):
        raise ValueError(f"trailing characters in {text!r}")
    return canonicalize(out)


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


def enumerate_expressions(cfg: GrammarConfig) -> list[Expression]:
    """All canonical expressions within the depth and node limits.

    Sorted by ``(nodes, depth, text form)``.
    """
    found = []
    for n in range(1, cfg.max_nodes + 1):
        found.extend(_exact(cfg.kind, n, cfg.max_depth))
    out = [canonicalize(e) for e in found]
    out.sort(key=lambda e: (*reversed(measure(e)), str(e)))
    return out


@lru_cache(maxsize=None)
def _atoms(kind: str, n: int, d: int) -> tuple[Expression, ...]:
    """Non-sum canonical structures with exactly ``n`` nodes and depth <= ``d``."""
    if n == 1:
        return (R,)
    if d == 0:
        return ()
    return tuple(Block(e, kind) for e in _exact(kind, n - 1, d - 1))


@lru_cache(maxsize=None)
def _exact(kind: str, n: int, d: int) -> tuple[Expression, ...]:
    """Canonical structures with exactly ``n`` nodes and depth <= ``d``."""
    out = list(_atoms(kind, n, d))
    pool = []
    for size in range(1, n):
        pool.extend((size, a) for a in _atoms(kind, size, d))
    pool.sort(key=lambda p: _order_key(p[1]))

    # multisets of >= 2 atoms, in canonical order; m atoms use m - 1 sum nodes
    def extend(start, terms, used):
        if len(terms) >= 2 and used + len(terms) - 1 == n:
            out.append(_fold(terms))
        for i in range(start, len(pool)):
            size, atom = pool[i]
            if used + size + len(terms) > n:
                continue
            extend(i, terms + [atom], used + size)

    extend(0, [], 0)
    return tuple(out)
