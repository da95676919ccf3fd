"""Signal quality statistics: rank IC, ICIR, inter-factor correlation and the
tear-sheet measures (quantile returns, monotonicity, turnover, daily win rate,
transaction-cost stress).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedResultError
from .panel import SignalMatrix

MIN_PAIRS = 3
SECONDS_PER_DAY = 86400


@dataclass(frozen=True, eq=False)
class ICSeries:
    """Per-bar rank IC, NaN where the bar is not evaluable."""

    values: np.ndarray
    timestamps: np.ndarray

    def present(self) -> np.ndarray:
        return self.values[~np.isnan(self.values)]

    def mean(self) -> float:
        p = self.present()
        return float(p.mean()) if p.size else float("nan")


@dataclass(frozen=True)
class FactorStats:
    ic_mean: float
    ic_abs_mean: float
    icir: float
    daily_win_rate: float
    fitness: float
    max_library_corr: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def _check_shapes(a: SignalMatrix, b: SignalMatrix) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def row_spearman(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Spearman correlation of each row of ``a`` with the same row of ``b``,
    over columns where both are present.

    Ranks are averaged over ties. A row with fewer than three joint pairs or
    a constant side is NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    both = ~(np.isnan(a) | np.isnan(b))
    ra = rankdata(np.where(both, a, np.nan), axis=1, nan_policy="omit")
    rb = rankdata(np.where(both, b, np.nan), axis=1, nan_policy="omit")
    k = both.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        da = np.where(both, ra - np.nansum(ra, axis=1, keepdims=True) / k[:, None], 0.0)
        db = np.where(both, rb - np.nansum(rb, axis=1, keepdims=True) / k[:, None], 0.0)
        sab = (da * db).sum(axis=1)
        saa = (da * da).sum(axis=1)
        sbb = (db * db).sum(axis=1)
        r = sab / np.sqrt(saa * sbb)
    r = np.clip(r, -1.0, 1.0)
    r[(k < MIN_PAIRS) | (saa == 0) | (sbb == 0)] = np.nan
    return r


def ic_series(signal: SignalMatrix, target: SignalMatrix) -> ICSeries:
    """Cross-sectional rank IC of ``signal`` against ``target`` per bar."""
    _check_shapes(signal, target)
    return ICSeries(row_spearman(signal.values, target.values), np.asarray(signal.timestamps))


def icir(series: Union[ICSeries, np.ndarray]) -> float:
    """Mean over sample standard deviation of the present IC values."""
    vals = series.present() if isinstance(series, ICSeries) else np.asarray(series, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    if vals.size < 2:
        raise ValueError("ICIR needs at least 2 present IC values")
    sd = float(np.std(vals, ddof=1))
    if sd == 0.0 or vals.min() == vals.max():
        raise UndefinedResultError("ICIR undefined: IC series has zero dispersion")
    return float(vals.mean()) / sd


def factor_corr(a: SignalMatrix, b: SignalMatrix) -> float:
    """Time-averaged cross-sectional Spearman correlation of two signals."""
    _check_shapes(a, b)
    r = row_spearman(a.values, b.values)
    r = r[~np.isnan(r)]
    if r.size == 0:
        raise DataError("no bar with enough joint present values to correlate")
    return float(r.mean())


def daily_win_rate(series: ICSeries) -> float:
    """Fraction of UTC days whose mean IC is strictly positive."""
    vals = np.asarray(series.values, dtype=np.float64)
    ts = np.asarray(series.timestamps, dtype=np.int64)
    ok = ~np.isnan(vals)
    if not ok.any():
        raise DataError("no day with a present IC value")
    days = ts[ok] // SECONDS_PER_DAY
    uniq, inv = np.unique(days, return_inverse=True)
    sums = np.bincount(inv, weights=vals[ok], minlength=uniq.size)
    counts = np.bincount(inv, minlength=uniq.size)
    return float(np.mean(sums / counts > 0.0))


def factor_stats(signal: SignalMatrix, target: SignalMatrix, max_library_corr: float = 0.0) -> FactorStats:
    """Summary statistics of one signal; ICIR is NaN when undefined."""
    series = ic_series(signal, target)
    m = series.mean()
    try:
        ir = icir(series)
    except (ValueError, UndefinedResultError):
        ir = float("nan")
    try:
        wr = daily_win_rate(series)
    except DataError:
        wr = float("nan")
    fit = abs(m) if np.isfinite(m) else 0.0
    return FactorStats(m, fit, ir, wr, fit, float(max_library_corr))


# ----------------------------------------------------------------- quantiles


def quantile_buckets(values: np.ndarray, q: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Quantile index 0..q-1 per cell, -1 where absent or the bar has fewer
    than ``q`` present assets.

    Within a bar assets are sorted by value with ties kept in asset order,
    and the i-th of k sorted assets lands in bucket floor(i * q / k).
    """
    if q < 2:
        raise ValueError("q must be >= 2")
    present = ~np.isnan(values) if mask is None else mask
    keyed = np.where(present, values, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")
    pos = np.empty_like(order)
    rows = np.arange(values.shape[0])[:, None]
    pos[rows, order] = np.arange(values.shape[1])[None, :]
    k = present.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        bucket = (pos * q) // np.maximum(k, 1)[:, None]
    bucket[~present] = -1
    bucket[k < q] = -1
    return bucket


@dataclass(frozen=True, eq=False)
class QuantileReport:
    quantile_returns: np.ndarray
    long_short: np.ndarray
    timestamps: np.ndarray
    monotonicity: float

    @property
    def ls_mean(self) -> float:
        return float(self.long_short.mean())

    @property
    def ls_cumulative(self) -> np.ndarray:
        return np.cumsum(self.long_short)


def _bucket_means(bucket: np.ndarray, target: np.ndarray, q: int) -> np.ndarray:
    out = np.empty((bucket.shape[0], q))
    for b in range(q):
        sel = bucket == b
        cnt = sel.sum(axis=1)
        s = np.where(sel, target, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, b] = s / cnt
    return out


def _monotonicity(qr: np.ndarray) -> float:
    steps = np.diff(qr) > 0
    return 1.0 if steps.all() else float(steps.mean())


def _joint(signal: SignalMatrix, target: SignalMatrix, q: int):
    _check_shapes(signal, target)
    both = ~(np.isnan(signal.values) | np.isnan(target.values))
    bucket = quantile_buckets(signal.values, q, both)
    live = (bucket >= 0).any(axis=1)
    if not live.any():
        raise DataError(f"no bar has at least {q} present assets")
    return bucket, live


def quantile_analysis(signal: SignalMatrix, target: SignalMatrix, q: int = 5) -> QuantileReport:
    """Equal-weight target mean per signal quantile, averaged over bars."""
    bucket, live = _joint(signal, target, q)
    means = _bucket_means(bucket[live], target.values[live], q)
    qr = means.mean(axis=0)
    ls = means[:, -1] - means[:, 0]
    return QuantileReport(qr, ls, np.asarray(signal.timestamps)[live], _monotonicity(qr))


def _membership_turnover(bucket: np.ndarray, q: int) -> np.ndarray:
    """Per consecutive-bar fraction of assets whose top/bottom membership
    changes; NaN where either bar is not evaluable."""
    live = (bucket >= 0).any(axis=1)
    top = bucket == q - 1
    bot = bucket == 0
    present = bucket >= 0
    changed = (top[1:] != top[:-1]) | (bot[1:] != bot[:-1])
    universe = (present[1:] | present[:-1]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = changed.sum(axis=1) / universe
    frac[~(live[1:] & live[:-1])] = np.nan
    return frac


def turnover(signal: SignalMatrix, q: int = 5) -> float:
    """Average extreme-quantile membership turnover between consecutive bars."""
    if signal.shape[0] < 2:
        raise ValueError("turnover needs at least 2 bars")
    bucket = quantile_buckets(signal.values, q)
    frac = _membership_turnover(bucket, q)
    frac = frac[~np.isnan(frac)]
    if frac.size == 0:
        raise DataError(f"no consecutive bars with at least {q} present assets")
    return float(frac.mean())


@dataclass(frozen=True, eq=False)
class StressReport:
    costs_bps: tuple[float, ...]
    timestamps: np.ndarray
    gross: np.ndarray
    turnover: np.ndarray
    cumulative: dict

    def final(self) -> dict:
        return {c: float(s[-1]) if s.size else 0.0 for c, s in self.cumulative.items()}


def cost_stress(
    signal: SignalMatrix, target: SignalMatrix, q: int = 5, costs_bps: Sequence[float] = (1, 4, 7, 10, 11)
) -> StressReport:
    """Cumulative long-short return net of a per-unit-turnover charge.

    Per evaluable bar, net = gross - (c / 1e4) * turnover, where turnover is
    measured against the previous evaluable bar (zero for the first one).
    """
    costs = tuple(float(c) for c in costs_bps)
    if not costs:
        raise ValueError("costs_bps must be non-empty")
    if any(not np.isfinite(c) or c < 0 for c in costs):
        raise ValueError("every cost must be a finite value >= 0")
    bucket, live = _joint(signal, target, q)
    b = bucket[live]
    means = _bucket_means(b, target.values[live], q)
    gross = means[:, -1] - means[:, 0]
    turn = np.zeros(gross.size)
    if gross.size > 1:
        turn[1:] = _membership_turnover(b, q)
    cum = {c: np.cumsum(gross - (c / 1e4) * turn) for c in costs}
    return StressReport(costs, np.asarray(signal.timestamps)[live], gross, turn, cum)


# ----------------------------------------------------------------- tear sheet

TEARSHEET_COLUMNS = (
    "name",
    "ic_mean",
    "icir",
    "daily_win_rate",
    "q1_return",
    "qN_return",
    "ls_return",
    "ls_cumulative",
    "monotonicity",
    "avg_turnover",
)


def tearsheet(signal: SignalMatrix, target: SignalMatrix, q: int = 5) -> dict:
    stats = factor_stats(signal, target)
    rep = quantile_analysis(signal, target, q)
    try:
        avg_turn = turnover(signal, q)
    except (DataError, ValueError):
        avg_turn = float("nan")
    return {
        "ic_mean": stats.ic_mean,
        "icir": stats.icir,
        "daily_win_rate": stats.daily_win_rate,
        "q1_return": float(rep.quantile_returns[0]),
        "qN_return": float(rep.quantile_returns[-1]),
        "ls_return": rep.ls_mean,
        "ls_cumulative": float(rep.ls_cumulative[-1]),
        "monotonicity": rep.monotonicity,
        "avg_turnover": avg_turn,
    }


def write_tearsheet_csv(rows: Sequence[tuple[str, dict]], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TEARSHEET_COLUMNS)
        for name, row in rows:
            w.writerow([name] + [repr(float(row[c])) for c in TEARSHEET_COLUMNS[1:]])
