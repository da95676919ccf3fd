"""Operator registry: arity, parameter slots and typing for every DSL operator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType

CATEGORIES = (
    "arithmetic",
    "statistical",
    "time-series",
    "cross-sectional",
    "smoothing",
    "regression",
    "logical",
)

NUM = "num"
BOOL = "bool"

INT = "int"
REAL = "real"


@dataclass(frozen=True)
class OpSpec:
    """One operator.

    ``inputs`` lists the kind of each child expression; ``params`` lists the
    trailing literal parameters as (kind, minimum) pairs.
    """

    name: str
    category: str
    inputs: tuple[str, ...]
    output: str = NUM
    params: tuple[tuple[str, float], ...] = ()
    commutative: bool = False

    @property
    def arity(self) -> int:
        return len(self.inputs)

    @property
    def is_rolling(self) -> bool:
        return bool(self.params) and self.params[0][0] == INT


def _ops() -> list[OpSpec]:
    u, b = (NUM,), (NUM, NUM)
    w1 = ((INT, 1),)
    w2 = ((INT, 2),)
    ops = [
        OpSpec("Add", "arithmetic", b, commutative=True),
        OpSpec("Sub", "arithmetic", b),
        OpSpec("Mul", "arithmetic", b, commutative=True),
        OpSpec("Div", "arithmetic", b),
        OpSpec("Neg", "arithmetic", u),
        OpSpec("Abs", "arithmetic", u),
        OpSpec("Log", "arithmetic", u),
        OpSpec("SignedPower", "arithmetic", u, params=((REAL, -math.inf),)),
        OpSpec("Power", "arithmetic", u, params=((REAL, -math.inf),)),
        OpSpec("Inv", "arithmetic", u),
        OpSpec("Sqrt", "arithmetic", u),
        OpSpec("Square", "arithmetic", u),
        OpSpec("Exp", "arithmetic", u),
        OpSpec("Tanh", "arithmetic", u),
        OpSpec("Mean", "statistical", u, params=w1),
        OpSpec("Std", "statistical", u, params=w2),
        OpSpec("Var", "statistical", u, params=w2),
        OpSpec("Skew", "statistical", u, params=((INT, 3),)),
        OpSpec("Kurt", "statistical", u, params=((INT, 4),)),
        OpSpec("Med", "statistical", u, params=w1),
        OpSpec("Sum", "statistical", u, params=w1),
        OpSpec("Product", "statistical", u, params=w1),
        OpSpec("Corr", "statistical", b, params=w2),
        OpSpec("Delay", "time-series", u, params=w1),
        OpSpec("Delta", "time-series", u, params=w1),
        OpSpec("TsRank", "time-series", u, params=w1),
        OpSpec("TsMax", "time-series", u, params=w1),
        OpSpec("TsMin", "time-series", u, params=w1),
        OpSpec("TsArgMax", "time-series", u, params=w1),
        OpSpec("TsArgMin", "time-series", u, params=w1),
        OpSpec("TsDecay", "time-series", u, params=w1),
        OpSpec("CsRank", "cross-sectional", u),
        OpSpec("Scale", "cross-sectional", u),
        OpSpec("SMA", "smoothing", u, params=w1),
        OpSpec("EMA", "smoothing", u, params=w1),
        OpSpec("WMA", "smoothing", u, params=w1),
        OpSpec("Slope", "regression", u, params=w2),
        OpSpec("Rsquare", "regression", u, params=w2),
        OpSpec("Resi", "regression", u, params=w2),
        OpSpec("IfElse", "logical", (BOOL, NUM, NUM)),
        OpSpec("Greater", "logical", b, output=BOOL),
        OpSpec("Less", "logical", b, output=BOOL),
        OpSpec("GreaterEqual", "logical", b, output=BOOL),
        OpSpec("LessEqual", "logical", b, output=BOOL),
        OpSpec("And", "logical", (BOOL, BOOL), output=BOOL, commutative=True),
        OpSpec("Or", "logical", (BOOL, BOOL), output=BOOL, commutative=True),
        OpSpec("Eq", "logical", b, output=BOOL),
        OpSpec("Ne", "logical", b, output=BOOL),
    ]
    return ops


class OperatorRegistry:
    """Immutable name -> OpSpec mapping."""

    def __init__(self, ops):
        table = {}
        for op in ops:
            if op.name in table:
                raise ValueError(f"duplicate operator {op.name}")
            if op.category not in CATEGORIES:
                raise ValueError(f"{op.name}: unknown category {op.category}")
            table[op.name] = op
        self._ops = MappingProxyType(table)

    def __getitem__(self, name: str) -> OpSpec:
        return self._ops[name]

    def __contains__(self, name: object) -> bool:
        return name in self._ops

    def __iter__(self):
        return iter(self._ops.values())

    def __len__(self) -> int:
        return len(self._ops)

    def names(self) -> list[str]:
        return list(self._ops)

    def by_category(self, category: str) -> list[OpSpec]:
        return [op for op in self._ops.values() if op.category == category]

    def returning(self, kind: str) -> list[OpSpec]:
        return [op for op in self._ops.values() if op.output == kind]


REGISTRY = OperatorRegistry(_ops())
