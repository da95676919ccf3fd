"""Operator- and factor-level timing of both backends (pure compute, no I/O)."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from ..dsl import Expr, format_expr, parse
from ..panel import Panel
from . import naive, optimized
from .evaluate import Backend, evaluate

BENCH_COLUMNS = ("name", "kind", "backend", "median_ms", "speedup_vs_naive")

DEFAULT_OPERATORS = ("CsRank", "TsRank", "Corr", "Std", "TsDecay", "Med", "Mean", "TsMax", "EMA", "Skew", "Slope")


@dataclass(frozen=True)
class BenchRow:
    name: str
    kind: str
    backend: str
    median_ms: float
    speedup_vs_naive: float


def _time(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm-up: JIT compilation and page faults stay out of the timing
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1000.0


def _operator_call(module, name: str, x: np.ndarray, y: np.ndarray, window: int):
    if name in module.CROSS:
        return lambda: module.CROSS[name](x)
    if name in module.ROLLING2:
        return lambda: module.ROLLING2[name](x, y, window)
    return lambda: module.ROLLING[name](x, window)


def _pair(name: str, kind: str, t_naive: float, t_opt: float) -> list[BenchRow]:
    return [
        BenchRow(name, kind, Backend.NAIVE.value, t_naive, 1.0),
        BenchRow(name, kind, Backend.OPTIMIZED.value, t_opt, t_naive / t_opt if t_opt > 0 else float("inf")),
    ]


def bench_kernels(
    panel: Panel,
    exprs: Sequence[Union[Expr, str]] = (),
    repeats: int = 5,
    operators: Sequence[str] = DEFAULT_OPERATORS,
    window: int = 20,
) -> list[BenchRow]:
    """Median wall time per operator and per factor for each backend.

    Operator rows apply the kernel alone to the close (and volume) fields;
    factor rows time a full ``evaluate``.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    x = np.ascontiguousarray(panel.field("close"))
    y = np.ascontiguousarray(panel.field("volume"))
    rows: list[BenchRow] = []
    for name in operators:
        t_n = _time(_operator_call(naive, name, x, y, window), repeats)
        t_o = _time(_operator_call(optimized, name, x, y, window), repeats)
        rows.extend(_pair(name, "operator", t_n, t_o))
    for item in exprs:
        expr = parse(item) if isinstance(item, str) else item
        label = format_expr(expr)
        t_n = _time(lambda: evaluate(expr, panel, Backend.NAIVE), repeats)
        t_o = _time(lambda: evaluate(expr, panel, Backend.OPTIMIZED), repeats)
        rows.extend(_pair(label, "factor", t_n, t_o))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.name, r.kind, r.backend, f"{r.median_ms:.3f}", f"{r.speedup_vs_naive:.3f}"])
