"""Reward-program language: parser, validator and evaluator.

A program maps one step's instrumentation features (plus the sparse task
reward) to a per-agent shaping vector. The language has no loops, calls
into host code, randomness or state, so a parsed program is deterministic
and total by construction; evaluation additionally guards division,
substitutes 0 for missing features and clips the result to ``[-C, C]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .env import FEATURE_SCHEMA, FeatureSchema

MAX_SOURCE_BYTES = 64 * 1024
DEFAULT_CLIP = 1.0

GRAMMAR = r"""
program    = { let_stmt } agent_stmt { agent_stmt } ;
let_stmt   = "let" NAME "=" expr ";" ;
agent_stmt = "r" "[" ( INT | "i" ) "]" "=" expr ";" ;   (* r[i] defines every agent *)
expr       = compare [ "?" expr ":" expr ] ;
compare    = sum [ ( "<" | "<=" | ">" | ">=" | "==" | "!=" ) sum ] ;   (* yields 0 or 1 *)
sum        = product { ( "+" | "-" ) product } ;
product    = unary { ( "*" | "/" ) unary } ;            (* x / 0 evaluates to 0 *)
unary      = "-" unary | atom ;
atom       = NUMBER
           | "r_sparse"                                  (* this step's task reward *)
           | "i"                                         (* index of the agent being evaluated *)
           | NAME                                        (* an earlier let binding *)
           | "x" "." FEATURE [ "[" ( INT | "i" ) "]" ]   (* per-agent features need an index *)
           | ( "min" | "max" ) "(" expr "," expr { "," expr } ")"
           | "abs" "(" expr ")"
           | "clip" "(" expr "," expr "," expr ")"
           | "(" expr ")" ;
(* comments run from "#" to end of line; a missing feature reads as 0;
   a conditional is true when its value is nonzero *)
""".strip()


class DSLError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def __str__(self):
        if self.line:
            return f"{self.line}:{self.col}: {self.message}"
        return self.message


class ParseError(DSLError):
    def __init__(self, message: str, line: int = 0, col: int = 0, expected: Sequence[str] = ()):
        super().__init__(message, line, col)
        self.expected = tuple(expected)


class SchemaError(DSLError):
    pass


class BoundError(DSLError):
    pass


class SchemaMismatch(DSLError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Name:
    name: str  # let binding, "r_sparse" or "i"
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Feature:
    name: str
    index: int | str | None  # literal agent index, "i", or None for globals
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Neg:
    operand: object
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Cond:
    test: object
    then: object
    orelse: object
    pos: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class ProgramAST:
    let_bindings: tuple[tuple[str, object], ...]
    agent_exprs: tuple[object, ...]
    # True when every agent expression came from a single ``r[i] = ...``
    templated: bool = False


@dataclass(frozen=True)
class ProgramSource:
    text: str
    meta: dict = field(default_factory=dict, compare=False)


COMPARE_OPS = ("<=", ">=", "==", "!=", "<", ">")
FUNC_ARITY = {"min": (2, None), "max": (2, None), "abs": (1, 1), "clip": (3, 3)}
KEYWORDS = {"let", "r", "x", "i", "r_sparse"} | set(FUNC_ARITY)


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|[-+*/<>?:;,=()\[\].])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num, name, op, eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("num", "name", "op"):
            tokens.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, n_agents: int):
        self.toks = tokenize(text)
        self.i = 0
        self.n_agents = n_agents

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, message: str, expected: Sequence[str] = ()) -> ParseError:
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        if expected:
            message = f"{message}: expected {' or '.join(expected)}, found {found}"
        return ParseError(message, t.line, t.col, expected)

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "name") and t.text == text

    def expect(self, text: str, context: str = "syntax error") -> Token:
        if not self.at(text):
            raise self.error(context, [repr(text)])
        t = self.tok
        self.i += 1
        return t

    def program(self) -> ProgramAST:
        lets: list[tuple[str, object]] = []
        seen = set()
        while self.at("let"):
            self.i += 1
            t = self.tok
            if t.kind != "name" or t.text in KEYWORDS:
                raise self.error("bad let binding", ["a new name"])
            if t.text in seen:
                raise ParseError(f"duplicate binding {t.text!r}", t.line, t.col)
            self.i += 1
            self.expect("=")
            e = self.expr()
            self.expect(";")
            seen.add(t.text)
            lets.append((t.text, e))
        agents: dict[int, object] = {}
        template = None
        while self.at("r"):
            start = self.tok
            self.i += 1
            self.expect("[")
            t = self.tok
            if t.kind == "num" and t.text.isdigit():
                idx: int | str = int(t.text)
                if idx >= self.n_agents:
                    raise ParseError(f"agent index {idx} out of range 0..{self.n_agents - 1}", t.line, t.col)
            elif self.at("i"):
                idx = "i"
            else:
                raise self.error("bad agent index", ["an agent index", "'i'"])
            self.i += 1
            self.expect("]")
            self.expect("=")
            e = self.expr()
            self.expect(";")
            if idx == "i":
                if template is not None or agents:
                    raise ParseError("r[i] must be the only agent assignment", start.line, start.col)
                template = e
            else:
                if template is not None or idx in agents:
                    raise ParseError(f"agent {idx} assigned more than once", start.line, start.col)
                agents[idx] = e
        if self.at("let"):
            raise self.error("let bindings must precede agent assignments")
        if self.tok.kind != "eof":
            raise self.error("syntax error", ["'let'", "'r'", "end of input"])
        if template is not None:
            return ProgramAST(tuple(lets), (template,) * self.n_agents, templated=True)
        if len(agents) != self.n_agents:
            t = self.tok
            raise ParseError(
                f"expected {self.n_agents} agent expressions, found {len(agents)}",
                t.line,
                t.col,
                [f"r[{k}]" for k in range(self.n_agents) if k not in agents],
            )
        return ProgramAST(tuple(lets), tuple(agents[k] for k in range(self.n_agents)))

    def expr(self):
        start = self.tok
        test = self.compare()
        if self.at("?"):
            self.i += 1
            then = self.expr()
            self.expect(":", "incomplete conditional")
            orelse = self.expr()
            return Cond(test, then, orelse, (start.line, start.col))
        return test

    def compare(self):
        left = self.sum()
        t = self.tok
        if t.kind == "op" and t.text in COMPARE_OPS:
            self.i += 1
            right = self.sum()
            if self.tok.kind == "op" and self.tok.text in COMPARE_OPS:
                raise self.error("comparisons do not chain; use parentheses")
            return BinOp(t.text, left, right, (t.line, t.col))
        return left

    def sum(self):
        left = self.product()
        while self.tok.kind == "op" and self.tok.text in "+-":
            t = self.tok
            self.i += 1
            left = BinOp(t.text, left, self.product(), (t.line, t.col))
        return left

    def product(self):
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            t = self.tok
            self.i += 1
            left = BinOp(t.text, left, self.unary(), (t.line, t.col))
        return left

    def unary(self):
        if self.at("-"):
            t = self.tok
            self.i += 1
            return Neg(self.unary(), (t.line, t.col))
        return self.atom()

    def atom(self):
        t = self.tok
        pos = (t.line, t.col)
        if t.kind == "num":
            self.i += 1
            return Num(float(t.text), pos)
        if self.at("("):
            self.i += 1
            e = self.expr()
            self.expect(")", "unbalanced parenthesis")
            return e
        if t.kind == "name":
            if t.text == "x":
                self.i += 1
                self.expect(".", "feature access")
                ft = self.tok
                if ft.kind != "name":
                    raise self.error("feature access", ["a feature name"])
                self.i += 1
                index = None
                if self.at("["):
                    self.i += 1
                    it = self.tok
                    if it.kind == "num" and it.text.isdigit():
                        index = int(it.text)
                        if index >= self.n_agents:
                            raise ParseError(
                                f"agent index {index} out of range 0..{self.n_agents - 1}", it.line, it.col
                            )
                    elif self.at("i"):
                        index = "i"
                    else:
                        raise self.error("bad feature index", ["an agent index", "'i'"])
                    self.i += 1
                    self.expect("]")
                return Feature(ft.text, index, pos)
            if t.text in FUNC_ARITY:
                self.i += 1
                self.expect("(", f"call to {t.text}")
                args = [self.expr()]
                while self.at(","):
                    self.i += 1
                    args.append(self.expr())
                self.expect(")", f"call to {t.text}")
                lo, hi = FUNC_ARITY[t.text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    want = str(lo) if lo == hi else f"at least {lo}"
                    raise ParseError(f"{t.text}() takes {want} arguments, got {len(args)}", *pos)
                return Call(t.text, tuple(args), pos)
            if t.text in ("let", "r"):
                raise self.error("syntax error", ["an expression"])
            self.i += 1
            return Name(t.text, pos)
        raise self.error("syntax error", ["an expression"])


def parse(source: ProgramSource | str, n_agents: int = 2) -> ProgramAST:
    """Parse program text into an AST; raises ParseError with position."""
    text = source.text if isinstance(source, ProgramSource) else source
    if not text.strip():
        raise ParseError("empty program", 1, 1)
    if len(text.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise ParseError(f"program exceeds {MAX_SOURCE_BYTES} bytes", 1, 1)
    return _Parser(text, n_agents).program()


# ---------------------------------------------------------------------------
# pretty printer

_PREC = {"?": 0, "<": 1, "<=": 1, ">": 1, ">=": 1, "==": 1, "!=": 1, "+": 2, "-": 2, "*": 3, "/": 3}


def _fmt(e, prec: int = 0) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Name):
        return e.name
    if isinstance(e, Feature):
        if e.index is None:
            return f"x.{e.name}"
        return f"x.{e.name}[{e.index}]"
    if isinstance(e, Neg):
        return f"-{_fmt(e.operand, 4)}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(_fmt(a) for a in e.args)})"
    if isinstance(e, Cond):
        s = f"{_fmt(e.test, 1)} ? {_fmt(e.then)} : {_fmt(e.orelse)}"
        return f"({s})" if prec > 0 else s
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        # left-associative: the right operand binds one level tighter;
        # comparisons do not chain, so both sides must bind tighter
        left = _fmt(e.left, p + 1 if p == 1 else p)
        right = _fmt(e.right, p + 1)
        s = f"{left} {e.op} {right}"
        return f"({s})" if p < prec else s
    raise TypeError(f"not an expression node: {e!r}")


def pretty(ast: ProgramAST) -> str:
    lines = [f"let {name} = {_fmt(e)};" for name, e in ast.let_bindings]
    if ast.templated:
        lines.append(f"r[i] = {_fmt(ast.agent_exprs[0])};")
    else:
        lines += [f"r[{k}] = {_fmt(e)};" for k, e in enumerate(ast.agent_exprs)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation and compilation


class Verdict(str, Enum):
    VALID = "Valid"
    PARSE_ERROR = "ParseError"
    SCHEMA_ERROR = "SchemaError"
    BOUND_ERROR = "BoundError"


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int = 0
    col: int = 0

    def __str__(self):
        return f"{self.line}:{self.col}: {self.message}" if self.line else self.message


@dataclass(frozen=True)
class ValidityReport:
    verdict: Verdict
    messages: tuple[Diagnostic, ...] = ()

    @property
    def valid(self) -> bool:
        return self.verdict == Verdict.VALID

    @property
    def repair_trace(self) -> str:
        if self.valid:
            return ""
        return f"{self.verdict.value}:\n" + "\n".join(f"  {m}" for m in self.messages)


def _walk(e):
    yield e
    if isinstance(e, Neg):
        yield from _walk(e.operand)
    elif isinstance(e, BinOp):
        yield from _walk(e.left)
        yield from _walk(e.right)
    elif isinstance(e, Call):
        for a in e.args:
            yield from _walk(a)
    elif isinstance(e, Cond):
        yield from _walk(e.test)
        yield from _walk(e.then)
        yield from _walk(e.orelse)


def _check_expr(e, schema: FeatureSchema, bound: set[str], schema_errs: list, bound_errs: list):
    per_agent, globals_ = set(schema.per_agent_names), set(schema.global_names)
    for node in _walk(e):
        line, col = node.pos
        if isinstance(node, Num) and not math.isfinite(node.value):
            bound_errs.append(Diagnostic(f"non-finite numeric literal {node.value!r}", line, col))
        elif isinstance(node, Name) and node.name not in bound and node.name not in ("r_sparse", "i"):
            schema_errs.append(Diagnostic(f"unknown identifier {node.name!r}", line, col))
        elif isinstance(node, Feature):
            if node.name in per_agent:
                if node.index is None:
                    schema_errs.append(Diagnostic(f"per-agent feature x.{node.name} needs an agent index", line, col))
            elif node.name in globals_:
                if node.index is not None:
                    schema_errs.append(Diagnostic(f"global feature x.{node.name} takes no index", line, col))
            else:
                schema_errs.append(Diagnostic(f"unknown feature x.{node.name}", line, col))


def _as_float(v) -> float:
    return float(v) if v is not None else 0.0


def _compile_expr(e, let_slots: dict[str, int]) -> Callable:
    # every closure takes ctx = (features, r_sparse, agent index, let values)
    if isinstance(e, Num):
        v = float(e.value)
        return lambda ctx: v
    if isinstance(e, Name):
        if e.name == "r_sparse":
            return lambda ctx: ctx[1]
        if e.name == "i":
            return lambda ctx: float(ctx[2])
        slot = let_slots[e.name]
        return lambda ctx: ctx[3][slot]
    if isinstance(e, Feature):
        name, idx = e.name, e.index
        if idx is None:
            return lambda ctx: _as_float(ctx[0].get(name))
        if idx == "i":

            def per_agent_i(ctx):
                v = ctx[0].get(name)
                return float(v[ctx[2]]) if v is not None and ctx[2] < len(v) else 0.0

            return per_agent_i

        def per_agent_k(ctx):
            v = ctx[0].get(name)
            return float(v[idx]) if v is not None and idx < len(v) else 0.0

        return per_agent_k
    if isinstance(e, Neg):
        f = _compile_expr(e.operand, let_slots)
        return lambda ctx: -f(ctx)
    if isinstance(e, BinOp):
        a, b = _compile_expr(e.left, let_slots), _compile_expr(e.right, let_slots)
        op = e.op
        if op == "+":
            return lambda ctx: a(ctx) + b(ctx)
        if op == "-":
            return lambda ctx: a(ctx) - b(ctx)
        if op == "*":
            return lambda ctx: a(ctx) * b(ctx)
        if op == "/":

            def div(ctx):
                den = b(ctx)
                return a(ctx) / den if den != 0 else 0.0

            return div
        if op == "<":
            return lambda ctx: 1.0 if a(ctx) < b(ctx) else 0.0
        if op == "<=":
            return lambda ctx: 1.0 if a(ctx) <= b(ctx) else 0.0
        if op == ">":
            return lambda ctx: 1.0 if a(ctx) > b(ctx) else 0.0
        if op == ">=":
            return lambda ctx: 1.0 if a(ctx) >= b(ctx) else 0.0
        if op == "==":
            return lambda ctx: 1.0 if a(ctx) == b(ctx) else 0.0
        if op == "!=":
            return lambda ctx: 1.0 if a(ctx) != b(ctx) else 0.0
    if isinstance(e, Call):
        fs = [_compile_expr(x, let_slots) for x in e.args]
        if e.func == "abs":
            f = fs[0]
            return lambda ctx: abs(f(ctx))
        if e.func == "min":
            return lambda ctx: min(f(ctx) for f in fs)
        if e.func == "max":
            return lambda ctx: max(f(ctx) for f in fs)
        if e.func == "clip":
            v, lo, hi = fs
            return lambda ctx: min(max(v(ctx), lo(ctx)), hi(ctx))
    if isinstance(e, Cond):
        t, y, n = (_compile_expr(x, let_slots) for x in (e.test, e.then, e.orelse))
        return lambda ctx: y(ctx) if t(ctx) != 0 else n(ctx)
    raise TypeError(f"cannot compile {e!r}")


@dataclass(frozen=True, eq=False)
class CompiledProgram:
    """A validated program bound to a feature schema. Immutable."""

    ast: ProgramAST
    schema_hash: str
    clip_bound: float
    _lets: tuple = field(repr=False, default=())
    _agents: tuple = field(repr=False, default=())

    @property
    def n_agents(self) -> int:
        return len(self.ast.agent_exprs)

    def __call__(self, features: Mapping, r_sparse: float = 0.0) -> np.ndarray:
        return evaluate(self, features, r_sparse)

    def evaluate_list(self, features: Mapping, r_sparse: float = 0.0) -> list[float]:
        c = self.clip_bound
        r_sparse = float(r_sparse)
        out = []
        for k, f in enumerate(self._agents):
            lets: list[float] = []
            ctx = (features, r_sparse, k, lets)
            for g in self._lets:
                lets.append(g(ctx))
            v = f(ctx)
            if v != v:  # NaN from inf - inf and the like
                v = 0.0
            out.append(c if v > c else -c if v < -c else v)
        return out


def evaluate(program: CompiledProgram, features: Mapping, r_sparse: float = 0.0) -> np.ndarray:
    """Per-agent shaping vector, clipped to [-C, C] and always finite."""
    h = getattr(features, "schema_hash", None)
    if h is not None and h != program.schema_hash:
        raise SchemaMismatch(f"features carry schema {h}, program was validated against {program.schema_hash}")
    return np.asarray(program.evaluate_list(features, r_sparse), dtype=np.float64)


def probe_features(schema: FeatureSchema, rng: np.random.Generator, missing: float = 0.0) -> dict:
    """Random feature vector; each entry is dropped with probability ``missing``."""
    out = {}
    for name in schema.per_agent_names:
        if rng.random() >= missing:
            out[name] = tuple(float(v) for v in rng.normal(0.0, 3.0, schema.n_agents).round(rng.integers(0, 3)))
    for name in schema.global_names:
        if rng.random() >= missing:
            out[name] = float(rng.normal(0.0, 3.0))
    return out


def validate(
    ast: ProgramAST, schema: FeatureSchema = FEATURE_SCHEMA, clip: float = DEFAULT_CLIP
) -> tuple[ValidityReport, CompiledProgram | None]:
    schema_errs: list[Diagnostic] = []
    bound_errs: list[Diagnostic] = []
    clip = float(clip)
    if not (math.isfinite(clip) and clip > 0):
        bound_errs.append(Diagnostic(f"clip bound must be finite and positive, got {clip!r}"))
    if len(ast.agent_exprs) != schema.n_agents:
        schema_errs.append(Diagnostic(f"program defines {len(ast.agent_exprs)} agents, schema has {schema.n_agents}"))
    bound: set[str] = set()
    for name, e in ast.let_bindings:
        _check_expr(e, schema, bound, schema_errs, bound_errs)
        bound.add(name)
    seen = set()
    for e in ast.agent_exprs:
        if id(e) not in seen:
            seen.add(id(e))
            _check_expr(e, schema, bound, schema_errs, bound_errs)
    if schema_errs:
        return ValidityReport(Verdict.SCHEMA_ERROR, tuple(schema_errs)), None
    if bound_errs:
        return ValidityReport(Verdict.BOUND_ERROR, tuple(bound_errs)), None

    slots: dict[str, int] = {}
    lets = []
    for name, e in ast.let_bindings:
        lets.append(_compile_expr(e, slots))
        slots[name] = len(slots)
    agents = tuple(_compile_expr(e, slots) for e in ast.agent_exprs)
    prog = CompiledProgram(ast, schema.digest, clip, tuple(lets), agents)

    # envelope probes: determinism on a random vector, totality on empty and zero vectors
    rng = np.random.default_rng(int(schema.digest, 16) % (2**32))
    probes = [probe_features(schema, rng), {}, {n: (0.0,) * schema.n_agents for n in schema.per_agent_names}]
    for feats in probes:
        first = prog.evaluate_list(feats, 20.0)
        second = prog.evaluate_list(feats, 20.0)
        if first != second or not all(math.isfinite(v) and abs(v) <= clip for v in first):
            return ValidityReport(Verdict.BOUND_ERROR, (Diagnostic("envelope probe failed"),)), None
    return ValidityReport(Verdict.VALID), prog


def check(
    source: ProgramSource | str,
    schema: FeatureSchema = FEATURE_SCHEMA,
    clip: float = DEFAULT_CLIP,
) -> tuple[ValidityReport, CompiledProgram | None]:
    """Parse and validate in one go; parse failures become a ParseError verdict."""
    try:
        ast = parse(source, schema.n_agents)
    except ParseError as exc:
        msg = exc.message
        return ValidityReport(Verdict.PARSE_ERROR, (Diagnostic(msg, exc.line, exc.col),)), None
    return validate(ast, schema, clip)


def compile_program(
    source: ProgramSource | str, schema: FeatureSchema = FEATURE_SCHEMA, clip: float = DEFAULT_CLIP
) -> CompiledProgram:
    """Like :func:`check` but raises the matching DSLError on failure."""
    report, prog = check(source, schema, clip)
    if prog is None:
        err = {
            Verdict.PARSE_ERROR: ParseError,
            Verdict.SCHEMA_ERROR: SchemaError,
            Verdict.BOUND_ERROR: BoundError,
        }[report.verdict]
        first = report.messages[0]
        raise err("; ".join(m.message for m in report.messages), first.line, first.col)
    return prog
