"""Coefficient expression language.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-'? power
    power  := atom ('^' unary)?
    atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

Identifiers are the time ``t``, state coordinates ``x1 .. xd`` and the
functions ``sin cos exp log tanh sqrt abs`` (one argument) and ``min max``
(two or more).  So ``-x1^2`` is ``-(x1^2)`` and ``2^3^2`` is ``2^(3^2)``.

Evaluation is vectorised over numpy arrays.  ``log`` of a non-positive
number, ``sqrt`` of a negative one, division by zero and a power with no
real value raise :class:`EvaluationError` instead of producing NaN.

Expressions also compile to a flat postfix program that the compiled kernel
(or its numpy fallback) evaluates without building a tree per call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import CoefficientFn
from .errors import EvaluationError, InvalidArgument, ParseError

UNARY_FUNCS = ("sin", "cos", "exp", "log", "tanh", "sqrt", "abs")
VARIADIC_FUNCS = ("min", "max")
FUNCTIONS = UNARY_FUNCS + VARIADIC_FUNCS
MAX_DEPTH = 100


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "t" or "x<k>", k >= 1

    @property
    def index(self) -> int:
        """Zero-based state index; -1 for time."""
        return -1 if self.name == "t" else int(self.name[1:]) - 1


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[Num, Var, Neg, BinOp, Call]

# --------------------------------------------------------------------------
# lexer / parser
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+\-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),−])
    """,
    re.VERBOSE,
)
_VAR_RE = re.compile(r"x([1-9][0-9]*)")


@dataclass(frozen=True)
class _Tok:
    kind: str  # number | ident | op | end
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", pos,
                             ("number", "identifier", "operator"))
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if text == "−":
                text = "-"
            toks.append(_Tok(kind, text, pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0
        self.depth = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def _expect(self, text: str):
        if self.tok.text != text or self.tok.kind != "op":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.pos, (repr(text),))
        return self._advance()

    @staticmethod
    def _describe(tok: _Tok) -> str:
        return "end of input" if tok.kind == "end" else f"token {tok.text!r}"

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self._describe(self.tok)}", self.tok.pos,
                             ("'+'", "'-'", "'*'", "'/'", "'^'", "end of input"))
        return node

    def expr(self) -> Node:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ParseError("expression nested too deeply", self.tok.pos)
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self._advance().text
            node = BinOp(op, node, self.term())
        self.depth -= 1
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self._advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self._advance()
            return Neg(self.power())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self._advance()
            self.depth += 1
            if self.depth > MAX_DEPTH:
                raise ParseError("expression nested too deeply", self.tok.pos)
            exponent = self.unary()
            self.depth -= 1
            return BinOp("^", base, exponent)
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "number":
            self._advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {tok.text!r} overflows", tok.pos)
            return Num(value)
        if tok.kind == "ident":
            self._advance()
            name = tok.text
            if name in FUNCTIONS:
                return self._call(name, tok)
            if name == "t" or _VAR_RE.fullmatch(name):
                if self.tok.kind == "op" and self.tok.text == "(":
                    raise ParseError(f"{name!r} is not a function", self.tok.pos)
                return Var(name)
            raise ParseError(f"unknown identifier {name!r}", tok.pos,
                             ("t", "x1..xd") + FUNCTIONS)
        if tok.kind == "op" and tok.text == "(":
            self._advance()
            node = self.expr()
            self._expect(")")
            return node
        raise ParseError(f"unexpected {self._describe(tok)}", tok.pos,
                         ("number", "identifier", "'('", "'-'"))

    def _call(self, name: str, name_tok: _Tok) -> Node:
        self._expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self._advance()
            args.append(self.expr())
        self._expect(")")
        if name in UNARY_FUNCS and len(args) != 1:
            raise ParseError(f"{name} takes exactly 1 argument, got {len(args)}", name_tok.pos)
        if name in VARIADIC_FUNCS and len(args) < 2:
            raise ParseError(f"{name} takes at least 2 arguments, got {len(args)}", name_tok.pos)
        return Call(name, tuple(args))


def parse_expr(source: str) -> Node:
    """Parse ``source`` into an expression tree.

    Raises
    ------
    ParseError
        On any string outside the grammar; carries the character position
        and the set of acceptable tokens.
    """
    if not isinstance(source, str):
        raise ParseError("expression must be a string", 0)
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# printing
# --------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    if isinstance(node, Num) and node.value < 0:
        return _PREC["neg"]
    return _PREC["atom"]


def _wrap(node: Node, min_prec: int) -> str:
    s = to_source(node)
    return s if _prec(node) >= min_prec else f"({s})"


def to_source(node: Node) -> str:
    """Print ``node`` with the minimum parentheses needed to re-parse it identically."""
    if isinstance(node, Num):
        s = repr(float(node.value))
        return f"({s})" if node.value < 0 else s
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + _wrap(node.operand, _PREC["^"])
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    op = node.op
    if op in "+-":
        return f"{_wrap(node.left, 1)} {op} {_wrap(node.right, 2)}"
    if op in "*/":
        return f"{_wrap(node.left, 2)} {op} {_wrap(node.right, 3)}"
    return f"{_wrap(node.left, 5)}^{_wrap(node.right, 3)}"


def variables(node: Node) -> set:
    """Names of the variables referenced by ``node``."""
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        out = set()
        for a in node.args:
            out |= variables(a)
        return out
    return set()


def max_state_index(node: Node) -> int:
    """Largest 1-based state coordinate used (0 if none)."""
    idx = [Var(v).index + 1 for v in variables(node) if v != "t"]
    return max(idx, default=0)


# --------------------------------------------------------------------------
# numpy evaluation
# --------------------------------------------------------------------------

_NP_UNARY = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh, "abs": np.abs,
}


def _checked_pow(a, b):
    bad = (a == 0) & (b < 0)
    with np.errstate(all="ignore"):
        r = np.power(a, b)
    bad |= np.isnan(r) & ~np.isnan(a) & ~np.isnan(b)
    if np.any(bad):
        raise EvaluationError("power has no real value (negative base or zero to a negative power)")
    return r


def evaluate(node: Node, t, x) -> np.ndarray:
    """Evaluate ``node`` at time(s) ``t`` and state(s) ``x`` of shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    lead = np.broadcast_shapes(t.shape, x.shape[:-1])
    out = np.broadcast_to(_eval(node, t, x), lead).astype(float, copy=True)
    if np.any(np.isnan(out)):
        raise EvaluationError(f"expression {to_source(node)!r} evaluated to NaN")
    return out


def _eval(node: Node, t, x):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        if node.name == "t":
            return t
        k = node.index
        if k >= x.shape[-1]:
            raise EvaluationError(f"variable {node.name} exceeds state dimension {x.shape[-1]}")
        return x[..., k]
    if isinstance(node, Neg):
        return -_eval(node.operand, t, x)
    if isinstance(node, Call):
        args = [_eval(a, t, x) for a in node.args]
        name = node.name
        with np.errstate(all="ignore"):
            if name in _NP_UNARY:
                return _NP_UNARY[name](args[0])
            if name == "log":
                if np.any(np.asarray(args[0]) <= 0):
                    raise EvaluationError("log of a non-positive number")
                return np.log(args[0])
            if name == "sqrt":
                if np.any(np.asarray(args[0]) < 0):
                    raise EvaluationError("sqrt of a negative number")
                return np.sqrt(args[0])
            fold = np.minimum if name == "min" else np.maximum
            r = args[0]
            for a in args[1:]:
                r = fold(r, a)
            return r
    a = _eval(node.left, t, x)
    b = _eval(node.right, t, x)
    with np.errstate(all="ignore"):
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(np.asarray(b) == 0):
                raise EvaluationError("division by zero")
            return a / b
    return _checked_pow(a, b)


# --------------------------------------------------------------------------
# postfix programs
# --------------------------------------------------------------------------

# opcodes shared with the compiled kernel; keep in sync with _ckernels.pyx
OP_CONST, OP_T, OP_X, OP_NEG = 0, 1, 2, 3
OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = 4, 5, 6, 7, 8
OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_TANH, OP_SQRT, OP_ABS = 9, 10, 11, 12, 13, 14, 15
OP_MIN, OP_MAX = 16, 17

_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_FUNC_OPS = {"sin": OP_SIN, "cos": OP_COS, "exp": OP_EXP, "log": OP_LOG, "tanh": OP_TANH,
             "sqrt": OP_SQRT, "abs": OP_ABS, "min": OP_MIN, "max": OP_MAX}

# kernel error codes
ERR_OK, ERR_LOG, ERR_SQRT, ERR_DIV, ERR_POW, ERR_NAN, ERR_SIGMA = 0, 1, 2, 3, 4, 5, 6
ERROR_MESSAGES = {
    ERR_LOG: "log of a non-positive number",
    ERR_SQRT: "sqrt of a negative number",
    ERR_DIV: "division by zero",
    ERR_POW: "power has no real value (negative base or zero to a negative power)",
    ERR_NAN: "expression evaluated to NaN",
    ERR_SIGMA: "sigma is singular or ill-conditioned",
}


@dataclass(frozen=True, eq=False)
class ProgramSet:
    """Several postfix programs sharing one code/constant buffer.

    Program ``j`` occupies ``code[offsets[j]:offsets[j+1]]``; each row of
    ``code`` is ``(opcode, argument)``.
    """

    code: np.ndarray       # (n_ops, 2) int32
    offsets: np.ndarray    # (n_programs + 1,) int32
    consts: np.ndarray     # (n_consts,) float64
    max_stack: int
    dim: int
    t_offset: float = 0.0

    @property
    def n_programs(self) -> int:
        return self.offsets.size - 1


def _emit(node: Node, code: list, consts: list) -> int:
    """Append postfix code for ``node``; return the stack depth it needs."""
    if isinstance(node, Num):
        consts.append(float(node.value))
        code.append((OP_CONST, len(consts) - 1))
        return 1
    if isinstance(node, Var):
        code.append((OP_T, 0) if node.name == "t" else (OP_X, node.index))
        return 1
    if isinstance(node, Neg):
        depth = _emit(node.operand, code, consts)
        code.append((OP_NEG, 0))
        return depth
    if isinstance(node, Call):
        op = _FUNC_OPS[node.name]
        depth = _emit(node.args[0], code, consts)
        for a in node.args[1:]:
            depth = max(depth, 1 + _emit(a, code, consts))
            code.append((op, 0))
        if len(node.args) == 1:
            code.append((op, 0))
        return depth
    dl = _emit(node.left, code, consts)
    dr = _emit(node.right, code, consts)
    code.append((_BIN_OPS[node.op], 0))
    return max(dl, 1 + dr)


def compile_programs(nodes, dim: int, t_offset: float = 0.0) -> ProgramSet:
    """Compile a flat sequence of trees over ``dim`` state variables."""
    code: list = []
    consts: list = []
    offsets = [0]
    depth = 1
    for node in nodes:
        if max_state_index(node) > dim:
            raise InvalidArgument(
                f"expression {to_source(node)!r} uses a variable beyond x{dim}")
        depth = max(depth, _emit(node, code, consts))
        offsets.append(len(code))
    return ProgramSet(
        np.asarray(code, dtype=np.int32).reshape(-1, 2),
        np.asarray(offsets, dtype=np.int32),
        np.asarray(consts if consts else [0.0], dtype=float),
        int(depth),
        int(dim),
        float(t_offset),
    )


# --------------------------------------------------------------------------
# coefficient backed by expressions
# --------------------------------------------------------------------------


class ExprCoefficient(CoefficientFn):
    """A scalar, vector or matrix coefficient whose entries are expressions.

    Parameters
    ----------
    entries : str, number, or nested lists of those
        Nesting depth fixes the output shape (0: scalar, 1: vector, 2: matrix).
    dim : int
        State dimension ``d``; entries may reference ``x1 .. xd``.
    """

    def __init__(self, entries, dim: int, t_offset: float = 0.0):
        arr = np.empty(np.shape(entries), dtype=object) if np.ndim(entries) else None
        if arr is None:
            nodes = np.empty((), dtype=object)
            nodes[()] = _to_node(entries)
        else:
            nodes = arr
            for idx in np.ndindex(*nodes.shape):
                nodes[idx] = _to_node(_index(entries, idx))
        self.nodes = nodes
        self.shape = nodes.shape
        self.dim = int(dim)
        self.t_offset = float(t_offset)
        for node in self.nodes.flat:
            if max_state_index(node) > self.dim:
                raise InvalidArgument(
                    f"expression {to_source(node)!r} uses a variable beyond x{self.dim}")

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float) + self.t_offset
        lead = np.broadcast_shapes(t.shape, x.shape[:-1])
        out = np.empty(lead + self.shape)
        for idx in np.ndindex(*self.shape):
            out[(Ellipsis,) + idx] = evaluate(self.nodes[idx], t, x)
        return out

    def shifted(self, t0):
        copy = object.__new__(ExprCoefficient)
        copy.__dict__.update(self.__dict__)
        copy.t_offset = self.t_offset + float(t0)
        return copy

    @property
    def is_zero(self):
        return all(isinstance(n, Num) and n.value == 0 for n in self.nodes.flat)

    @property
    def is_constant(self):
        return all(not variables(n) for n in self.nodes.flat)

    @property
    def depends_on_state(self):
        return any(v != "t" for n in self.nodes.flat for v in variables(n))

    def sources(self):
        out = np.empty(self.shape, dtype=object)
        for idx in np.ndindex(*self.shape):
            out[idx] = to_source(self.nodes[idx])
        return out.tolist()

    def programs(self) -> ProgramSet:
        return compile_programs(list(self.nodes.flat), self.dim, self.t_offset)

    def __repr__(self):
        return f"ExprCoefficient({self.sources()!r}, dim={self.dim})"


def _index(entries, idx):
    for i in idx:
        entries = entries[i]
    return entries


def _to_node(entry) -> Node:
    if isinstance(entry, str):
        return parse_expr(entry)
    if isinstance(entry, (int, float, np.integer, np.floating)) and not isinstance(entry, bool):
        value = float(entry)
        if not math.isfinite(value):
            raise InvalidArgument("coefficient constants must be finite")
        if value < 0:
            return Neg(Num(-value))
        return Num(value)
    raise InvalidArgument(f"cannot interpret coefficient entry {entry!r}")


def merge_programs(*sets: ProgramSet) -> ProgramSet:
    """Concatenate program sets that share a dimension and time offset."""
    dim = sets[0].dim
    code, consts, offsets = [], [], [0]
    for ps in sets:
        if ps.dim != dim or ps.t_offset != sets[0].t_offset:
            raise InvalidArgument("program sets disagree on dimension or time offset")
        c = ps.code.copy()
        c[c[:, 0] == OP_CONST, 1] += sum(len(k) for k in consts)
        code.append(c)
        consts.append(ps.consts)
        base = offsets[-1]
        offsets.extend(base + ps.offsets[1:])
    return ProgramSet(
        np.concatenate(code).astype(np.int32),
        np.asarray(offsets, dtype=np.int32),
        np.concatenate(consts),
        max(ps.max_stack for ps in sets),
        dim,
        sets[0].t_offset,
    )
