"""Factor expression trees: parsing, validation, canonical formatting and
structural pattern signatures.

Grammar::

    expr  := $field | number | Name(arg {, arg})
    arg   := expr | number        # trailing numbers fill parameter slots

Operator names are case-sensitive. ``$amt`` is accepted as an alias of
``$amount``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Union

from .errors import ParseError
from .panel import ALL_FIELDS
from .registry import BOOL, INT, NUM, REGISTRY, OperatorRegistry

FIELD_ALIASES = {"amt": "amount"}


@dataclass(frozen=True)
class Field:
    name: str


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Call:
    op: str
    args: tuple["Expr", ...]
    params: tuple[Union[int, float], ...] = ()


Expr = Union[Field, Const, Call]


def children(node: Expr) -> tuple[Expr, ...]:
    return node.args if isinstance(node, Call) else ()


def walk(node: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def depth(node: Expr) -> int:
    """Number of levels; a lone leaf has depth 1."""
    if isinstance(node, Call):
        return 1 + max(depth(c) for c in node.args)
    return 1


def node_count(node: Expr) -> int:
    return sum(1 for _ in walk(node))


def fields_of(node: Expr) -> frozenset[str]:
    return frozenset(n.name for n in walk(node) if isinstance(n, Field))


def windows_of(node: Expr) -> list[int]:
    out = []
    for n in walk(node):
        if isinstance(n, Call):
            spec = REGISTRY[n.op]
            out.extend(int(p) for p, (kind, _) in zip(n.params, spec.params) if kind == INT)
    return out


def output_kind(node: Expr, registry: OperatorRegistry = REGISTRY) -> str:
    if isinstance(node, Call):
        return registry[node.op].output
    return NUM


# ---------------------------------------------------------------- formatting

def _fmt_real(v: float) -> str:
    return repr(float(v))


def format_expr(expr: Expr) -> str:
    """Canonical single-line text; ``parse(format_expr(e)) == e``."""
    if isinstance(expr, Field):
        return "$" + expr.name
    if isinstance(expr, Const):
        return _fmt_real(expr.value)
    parts = [format_expr(a) for a in expr.args]
    spec = REGISTRY[expr.op] if expr.op in REGISTRY else None
    for i, p in enumerate(expr.params):
        kind = spec.params[i][0] if spec and i < len(spec.params) else INT
        parts.append(str(int(p)) if kind == INT else _fmt_real(p))
    return f"{expr.op}({', '.join(parts)})"


# ------------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<field>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind == "number":
            end = m.end()
            if end < len(text) and (text[end].isalnum() or text[end] in "._$"):
                j = end
                while j < len(text) and (text[j].isalnum() or text[j] in "._+-"):
                    j += 1
                raise ParseError(f"malformed number {text[pos:j]!r}", pos, text)
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


@dataclass
class _Arg:
    node: Expr
    pos: int
    literal: str | None  # source text when the argument was a bare number


class _Parser:
    def __init__(self, text: str, registry: OperatorRegistry):
        self.text = text
        self.registry = registry
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def error(self, msg: str, pos: int) -> ParseError:
        return ParseError(msg, pos, self.text)

    def parse(self) -> Expr:
        if self.peek().kind == "end":
            raise self.error("empty formula", 0)
        arg = self.parse_arg()
        tok = self.peek()
        if tok.kind == "rparen":
            raise self.error("unbalanced parentheses: unexpected ')'", tok.pos)
        if tok.kind != "end":
            raise self.error(f"unexpected {tok.text!r} after expression", tok.pos)
        if output_kind(arg.node, self.registry) != NUM:
            raise self.error("type violation: formula must produce a numeric signal, not a logical one", arg.pos)
        return arg.node

    def parse_arg(self) -> _Arg:
        tok = self.take()
        if tok.kind == "field":
            name = tok.text[1:]
            name = FIELD_ALIASES.get(name, name)
            if name not in ALL_FIELDS:
                raise self.error(f"unknown field ${tok.text[1:]}", tok.pos)
            return _Arg(Field(name), tok.pos, None)
        if tok.kind == "number":
            v = float(tok.text)
            if not math.isfinite(v):
                raise self.error(f"malformed number {tok.text!r}", tok.pos)
            return _Arg(Const(v), tok.pos, tok.text)
        if tok.kind == "name":
            return _Arg(self.parse_call(tok), tok.pos, None)
        if tok.kind == "end":
            raise self.error("unbalanced parentheses: unexpected end of formula", tok.pos)
        raise self.error(f"unexpected {tok.text!r}", tok.pos)

    def parse_call(self, name_tok: _Tok) -> Call:
        name = name_tok.text
        if name not in self.registry:
            raise self.error(f"unknown operator {name!r}", name_tok.pos)
        spec = self.registry[name]
        lp = self.take()
        if lp.kind != "lparen":
            raise self.error(f"expected '(' after {name}", lp.pos)
        args: list[_Arg] = []
        if self.peek().kind == "rparen":
            self.take()
        else:
            while True:
                args.append(self.parse_arg())
                tok = self.take()
                if tok.kind == "comma":
                    continue
                if tok.kind == "rparen":
                    break
                if tok.kind == "end":
                    raise self.error("unbalanced parentheses: missing ')'", tok.pos)
                raise self.error(f"expected ',' or ')' but found {tok.text!r}", tok.pos)

        n_expect = spec.arity + len(spec.params)
        if len(args) != n_expect:
            raise self.error(
                f"arity mismatch: {name} takes {spec.arity} expression(s)"
                f" and {len(spec.params)} parameter(s), got {len(args)} argument(s)",
                name_tok.pos,
            )
        exprs = args[: spec.arity]
        for arg, kind in zip(exprs, spec.inputs):
            got = output_kind(arg.node, self.registry)
            if got != kind:
                what = "logical value in numeric slot" if got == BOOL else "numeric value where a condition is expected"
                raise self.error(f"type violation: {what} of {name}", arg.pos)
        params: list[int | float] = []
        for arg, (kind, minimum) in zip(args[spec.arity:], spec.params):
            if arg.literal is None:
                raise self.error(f"{name} parameter must be a number literal", arg.pos)
            if kind == INT:
                if not re.fullmatch(r"[-+]?\d+", arg.literal):
                    raise self.error(f"{name} window must be an integer, got {arg.literal!r}", arg.pos)
                value: int | float = int(arg.literal)
            else:
                value = float(arg.literal)
            if value < minimum:
                raise self.error(f"{name} parameter {value} below minimum {int(minimum)}", arg.pos)
            params.append(value)
        return Call(name, tuple(a.node for a in exprs), tuple(params))


def parse(text: str, registry: OperatorRegistry = REGISTRY) -> Expr:
    """Parse and validate a formula string."""
    return _Parser(text, registry).parse()


def validate(expr: Expr, registry: OperatorRegistry = REGISTRY) -> Expr:
    """Check a programmatically built tree; errors are located in the
    canonical rendering of the tree."""
    _validate(expr, 0, registry, NUM)
    return expr


def _validate(node: Expr, pos: int, registry: OperatorRegistry, expected: str) -> None:
    if isinstance(node, Field):
        if node.name not in ALL_FIELDS:
            raise ParseError(f"unknown field ${node.name}", pos)
        got = NUM
    elif isinstance(node, Const):
        if not math.isfinite(node.value):
            raise ParseError("malformed number", pos)
        got = NUM
    else:
        if node.op not in registry:
            raise ParseError(f"unknown operator {node.op!r}", pos)
        spec = registry[node.op]
        if len(node.args) != spec.arity or len(node.params) != len(spec.params):
            raise ParseError(f"arity mismatch for {node.op}", pos)
        got = spec.output
        child_pos = pos + len(node.op) + 1
        for child, kind in zip(node.args, spec.inputs):
            _validate(child, child_pos, registry, kind)
            child_pos += len(format_expr(child)) + 2
        for p, (kind, minimum) in zip(node.params, spec.params):
            if kind == INT and (isinstance(p, bool) or int(p) != p):
                raise ParseError(f"{node.op} window must be an integer", child_pos)
            if not math.isfinite(float(p)) or p < minimum:
                raise ParseError(f"{node.op} parameter {p} below minimum", child_pos)
            child_pos += len(str(int(p)) if kind == INT else _fmt_real(p)) + 2
    if got != expected:
        what = "logical value in numeric slot" if got == BOOL else "numeric value where a condition is expected"
        raise ParseError(f"type violation: {what}", pos)


# ---------------------------------------------------------------- signatures

@dataclass(frozen=True, order=True)
class PatternSignature:
    """Structural fingerprint: root operator, sorted (category, name) multiset
    of the top two tree levels, and every referenced field."""

    root: str
    ops: tuple[tuple[str, str], ...]
    fields: tuple[str, ...]

    @property
    def key(self) -> str:
        ops = ";".join(f"{c}:{n}" for c, n in self.ops)
        return f"{self.root}|{ops}|{','.join(self.fields)}"

    @classmethod
    def from_key(cls, key: str) -> "PatternSignature":
        try:
            root, ops, fields = key.split("|")
        except ValueError:
            raise ValueError(f"malformed signature key {key!r}") from None
        op_pairs = tuple(tuple(p.split(":", 1)) for p in ops.split(";") if p)
        if any(len(p) != 2 for p in op_pairs):
            raise ValueError(f"malformed signature key {key!r}")
        field_names = tuple(f for f in fields.split(",") if f)
        return cls(root, tuple(sorted(op_pairs)), tuple(sorted(field_names)))

    def __str__(self) -> str:
        return self.key


def _root_label(node: Expr) -> str:
    if isinstance(node, Call):
        return node.op
    if isinstance(node, Field):
        return "$" + node.name
    return "const"


def signature(expr: Expr, registry: OperatorRegistry = REGISTRY) -> PatternSignature:
    top = [expr] + [c for c in children(expr)]
    ops = sorted((registry[n.op].category, n.op) for n in top if isinstance(n, Call))
    return PatternSignature(_root_label(expr), tuple(ops), tuple(sorted(fields_of(expr))))
