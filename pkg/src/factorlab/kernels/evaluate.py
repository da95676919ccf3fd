"""Expression evaluation over a panel with a selectable backend."""

from __future__ import annotations

import enum
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence, Union

import numpy as np

from ..dsl import Call, Const, Expr, Field, fields_of, parse, validate
from ..errors import EvaluationError, FactorLabError
from ..panel import Panel, SignalMatrix
from . import common, naive, optimized


class Backend(str, enum.Enum):
    NAIVE = "naive"
    OPTIMIZED = "optimized"


_TABLES = {
    Backend.NAIVE: (naive.ROLLING, naive.ROLLING2, naive.CROSS),
    Backend.OPTIMIZED: (optimized.ROLLING, optimized.ROLLING2, optimized.CROSS),
}


class _Evaluator:
    def __init__(self, panel: Panel, backend: Backend):
        self.panel = panel
        self.rolling, self.rolling2, self.cross = _TABLES[Backend(backend)]
        self.memo: dict[Expr, np.ndarray] = {}

    def __call__(self, node: Expr) -> np.ndarray:
        hit = self.memo.get(node)
        if hit is not None:
            return hit
        out = self._compute(node)
        common.clean(out)
        out.setflags(write=False)
        self.memo[node] = out
        return out

    def _compute(self, node: Expr) -> np.ndarray:
        if isinstance(node, Field):
            return np.array(self.panel.field(node.name), dtype=np.float64)
        if isinstance(node, Const):
            return np.full((self.panel.n_bars, self.panel.n_assets), float(node.value))
        op = node.op
        args = [self(a) for a in node.args]
        with np.errstate(all="ignore"):
            if op in common.BINARY:
                return np.array(common.BINARY[op](args[0], args[1]), dtype=np.float64)
            if op in common.UNARY:
                return np.array(common.UNARY[op](args[0]), dtype=np.float64)
            if op in common.UNARY_PARAM:
                return np.array(common.UNARY_PARAM[op](args[0], float(node.params[0])), dtype=np.float64)
            if op in common.SHIFT:
                return common.SHIFT[op](args[0], int(node.params[0]))
            if op == "IfElse":
                return common.if_else(*args)
            if op in self.cross:
                return self.cross[op](args[0])
            if op in self.rolling:
                return self.rolling[op](args[0], int(node.params[0]))
            if op in self.rolling2:
                return self.rolling2[op](args[0], args[1], int(node.params[0]))
        raise EvaluationError(f"no kernel for operator {op}")


def evaluate(
    expr: Union[Expr, str],
    panel: Panel,
    backend: Union[Backend, str] = Backend.OPTIMIZED,
) -> SignalMatrix:
    """Causal evaluation of one expression to a (time, asset) signal."""
    if isinstance(expr, str):
        expr = parse(expr)
    else:
        validate(expr)
    missing = sorted(f for f in fields_of(expr) if not panel.has_field(f))
    if missing:
        raise EvaluationError(f"panel lacks field(s): {', '.join(missing)}")
    values = _Evaluator(panel, Backend(backend))(expr)
    return SignalMatrix(np.array(values), panel.timestamps, panel.assets)


# ------------------------------------------------------------------ batches

_worker_state: dict = {}


def _init_worker(panel: Panel, backend: str) -> None:
    _worker_state["panel"] = panel
    _worker_state["backend"] = backend


def _eval_one(item):
    try:
        return evaluate(item, _worker_state["panel"], _worker_state["backend"]).values
    except FactorLabError as exc:
        return exc


def default_workers() -> int:
    raw = os.environ.get("FACTORLAB_WORKERS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_batch(
    exprs: Sequence[Union[Expr, str]],
    panel: Panel,
    backend: Union[Backend, str] = Backend.OPTIMIZED,
    workers: int | None = None,
) -> list[Union[SignalMatrix, FactorLabError]]:
    """Evaluate many expressions, in input order.

    A failing expression yields its exception object in place of a result;
    the rest of the batch is unaffected. Output is identical for any
    ``workers`` value.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    items = list(exprs)
    if not items:
        return []
    backend = Backend(backend).value
    if workers == 1 or len(items) == 1:
        _init_worker(panel, backend)
        try:
            raw = [_eval_one(i) for i in items]
        finally:
            _worker_state.clear()
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(panel, backend)) as pool:
            raw = list(pool.map(_eval_one, items, chunksize=max(1, len(items) // (4 * workers))))
    return [r if isinstance(r, FactorLabError) else SignalMatrix(r, panel.timestamps, panel.assets) for r in raw]
