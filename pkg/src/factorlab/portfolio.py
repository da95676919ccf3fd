"""Combining and selecting admitted factors.

All combiners first map each signal to per-bar centred ranks
``u = (2r - k - 1) / (2k)`` over its ``k`` present assets (average ranks for
ties), so every result is invariant to strictly monotone transforms of the
inputs. Signs come from training-period IC, with a zero IC counted as
positive.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedResultError
from .metrics import ic_series, icir
from .panel import SignalMatrix

log = logging.getLogger(__name__)

DROP_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CombinedSignal:
    signal: SignalMatrix
    method: str
    weights: tuple[float, ...]
    signs: tuple[int, ...]
    order: tuple[int, ...] = ()
    components: Optional[np.ndarray] = field(default=None, repr=False)


def rank_standardize(values: np.ndarray) -> np.ndarray:
    """Per-row centred rank in (-1/2, 1/2); NaN stays NaN."""
    r = rankdata(values, axis=1, nan_policy="omit")
    k = (~np.isnan(values)).sum(axis=1, keepdims=True).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (2.0 * r - k - 1.0) / (2.0 * k)


def ic_sign(ic: float) -> int:
    return -1 if ic < 0 else 1


def _check(signals: Sequence[SignalMatrix], ics: Sequence[float]) -> None:
    if not signals:
        raise ValueError("need at least one signal")
    if len(ics) != len(signals):
        raise ValueError("one training IC per signal is required")
    shape = signals[0].shape
    for s in signals[1:]:
        if s.shape != shape:
            raise ValueError(f"shape mismatch: {s.shape} vs {shape}")
    if not all(np.isfinite(ics)):
        raise ValueError("training ICs must be finite")


def _weighted(signals, ics, weights, method) -> CombinedSignal:
    signs = [ic_sign(c) for c in ics]
    num = np.zeros(signals[0].shape)
    den = np.zeros(signals[0].shape)
    for s, sg, w in zip(signals, signs, weights):
        if w == 0.0:
            continue
        u = rank_standardize(s.values)
        ok = ~np.isnan(u)
        num[ok] += (w * sg) * u[ok]
        den[ok] += w
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, np.nan)
    return CombinedSignal(signals[0].with_values(out), method, tuple(float(w) for w in weights), tuple(signs))


_EXACT_LIMIT = 2.0**52


def _exact_equal_mean(values: Sequence[np.ndarray], signs: Sequence[int]) -> np.ndarray:
    """Equal-weight signed mean of centred ranks, tie-exact.

    Each centred rank is an integer over 2k. Summing integer numerators over
    a per-bar common denominator and dividing once gives the correctly
    rounded value of the exact rational, so cells that tie mathematically
    tie in floating point too. Bars whose denominator grows too large fall
    back to plain float arithmetic.
    """
    T, M = values[0].shape
    nums, twoks, oks = [], [], []
    for v in values:
        ok = ~np.isnan(v)
        k = ok.sum(axis=1)
        r2 = np.nan_to_num(2.0 * rankdata(v, axis=1, nan_policy="omit"), nan=0.0)
        nums.append(np.where(ok, r2 - k[:, None] - 1, 0.0).astype(np.int64))
        twoks.append(np.where(k > 0, 2 * k, 1).astype(np.int64))
        oks.append(ok)
    D = np.lcm.reduce(np.stack(twoks), axis=0)
    n = np.sum(oks, axis=0)
    P = np.zeros((T, M), dtype=np.int64)
    exact = (D > 0) & (D * len(values) * M < _EXACT_LIMIT)
    scale = [np.where(exact, D // tk, 0) for tk in twoks]
    for a, sg, sc in zip(nums, signs, scale):
        P += sg * a * sc[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = P.astype(np.float64) / (D[:, None] * n).astype(np.float64)
        if not exact.all():
            us = [rank_standardize(v) for v in values]
            approx = sum(sg * np.nan_to_num(u, nan=0.0) for sg, u in zip(signs, us)) / n
            out = np.where(exact[:, None], out, approx)
    out[n == 0] = np.nan
    return out


def combine_equal(signals: Sequence[SignalMatrix], train_ics: Sequence[float]) -> CombinedSignal:
    """Sign-corrected mean of centred ranks over the factors present per cell."""
    _check(signals, train_ics)
    signs = [ic_sign(c) for c in train_ics]
    out = _exact_equal_mean([s.values for s in signals], signs)
    w = 1.0 / len(signals)
    return CombinedSignal(signals[0].with_values(out), "equal", tuple([w] * len(signals)), tuple(signs))


def combine_ic_weighted(signals: Sequence[SignalMatrix], train_ics: Sequence[float]) -> CombinedSignal:
    """As ``combine_equal`` with weights proportional to |train IC|."""
    _check(signals, train_ics)
    total = float(np.sum(np.abs(train_ics)))
    if total == 0.0:
        raise ValueError("all training ICs are zero")
    return _weighted(signals, train_ics, [abs(c) / total for c in train_ics], "ic_weighted")


def combine_orthogonal(
    signals: Sequence[SignalMatrix], train_ics: Sequence[float], keep_components: bool = False
) -> CombinedSignal:
    """Per-bar Gram-Schmidt over the assets where every factor is present.

    Factors are taken in descending |train IC|. Each is centred and scaled
    to unit norm, then stripped of its projection on the earlier surviving
    components; a residual with norm below 1e-10 is dropped for that bar.
    Survivors are sign-corrected and averaged with equal weight.
    """
    _check(signals, train_ics)
    order = sorted(range(len(signals)), key=lambda i: (-abs(train_ics[i]), i))
    U = [rank_standardize(signals[i].values) for i in order]
    mask = np.ones(signals[0].shape, dtype=bool)
    for u in U:
        mask &= ~np.isnan(u)
    T, M = mask.shape
    comps = np.zeros((len(order), T, M))
    alive = np.zeros((len(order), T), dtype=bool)
    for n, u in enumerate(U):
        v = np.where(mask, u, 0.0)
        cnt = mask.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(mask, v - v.sum(axis=1, keepdims=True) / np.maximum(cnt, 1), 0.0)
        nv = np.sqrt((v * v).sum(axis=1, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(nv > 0, v / nv, 0.0)
        for j in range(n):
            proj = (comps[j] * v).sum(axis=1, keepdims=True)
            v = v - proj * comps[j]
        norm = np.sqrt((v * v).sum(axis=1))
        alive[n] = norm >= DROP_TOL
        with np.errstate(invalid="ignore", divide="ignore"):
            comps[n] = np.where(alive[n][:, None], v / norm[:, None], 0.0)
    signs = [ic_sign(train_ics[i]) for i in order]
    total = np.zeros((T, M))
    for n, sg in enumerate(signs):
        total += sg * comps[n]
    count = alive.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / count[:, None]
    out[~mask | (count == 0)[:, None]] = np.nan
    comps[:, ~mask] = np.nan
    w = 1.0 / len(signals)
    sign_by_input = [ic_sign(c) for c in train_ics]
    return CombinedSignal(
        signals[0].with_values(out),
        "orthogonal",
        tuple([w] * len(signals)),
        tuple(sign_by_input),
        tuple(order),
        comps if keep_components else None,
    )


# ------------------------------------------------------------------- lasso


def lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    beta0: np.ndarray | None = None,
) -> np.ndarray:
    """Minimise ``(1/2n)||y - Xb||^2 + lam * ||b||_1`` by cyclic coordinate
    descent with soft-thresholding, until no coefficient moves by ``tol``."""
    n, p = X.shape
    G = X.T @ X / n
    c = X.T @ y / n
    b = np.zeros(p) if beta0 is None else np.array(beta0, dtype=np.float64)
    diag = np.diag(G).copy()
    for _ in range(max_iter):
        biggest = 0.0
        for j in range(p):
            if diag[j] == 0.0:
                continue
            rho = c[j] - G[j] @ b + diag[j] * b[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / diag[j]
            biggest = max(biggest, abs(new - b[j]))
            b[j] = new
        if biggest < tol:
            return b
    log.warning("coordinate descent hit max_iter=%d at lambda=%g", max_iter, lam)
    return b


def lasso_gradient(X: np.ndarray, y: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(1/n) X^T (y - Xb)``; at a solution |g_j| <= lam, with equality
    where b_j != 0."""
    return X.T @ (y - X @ b) / X.shape[0]


def _split_masks(T: int, split: Union[int, tuple]) -> tuple[np.ndarray, np.ndarray]:
    train = np.zeros(T, dtype=bool)
    valid = np.zeros(T, dtype=bool)
    if isinstance(split, (int, np.integer)):
        if not 0 < split < T:
            raise ValueError(f"split index {split} outside the panel (1..{T - 1})")
        train[:split] = True
        valid[split:] = True
    else:
        (a, b), (c, d) = split
        if not (0 <= a < b <= T and 0 <= c < d <= T):
            raise ValueError("train/validation ranges outside the panel")
        train[a:b] = True
        valid[c:d] = True
    return train, valid


def design_matrix(signals: Sequence[SignalMatrix], target: SignalMatrix, rows: np.ndarray | None = None):
    """Stack centred-rank factor values over (time, asset) cells with a
    present target. A missing factor value enters as 0, the neutral rank.

    Returns (X, y, t_index, a_index).
    """
    U = np.stack([np.nan_to_num(rank_standardize(s.values), nan=0.0) for s in signals], axis=-1)
    keep = ~np.isnan(target.values)
    if rows is not None:
        keep &= rows[:, None]
    t_idx, a_idx = np.nonzero(keep)
    return U[t_idx, a_idx], target.values[t_idx, a_idx], t_idx, a_idx


@dataclass
class LassoResult:
    weights: np.ndarray
    selected: list[int]
    lam: float
    path: list[dict]
    report: list[dict]
    column_mean: np.ndarray
    column_std: np.ndarray


def select_lasso(
    signals: Sequence[SignalMatrix],
    target: SignalMatrix,
    lambda_grid: Sequence[float],
    split: Union[int, tuple],
    ids: Sequence[int] | None = None,
    tol: float = 1e-8,
) -> LassoResult:
    """Sparse linear selection on standardized columns; lambda is chosen by
    mean validation IC of the fitted combination (first best in grid order).

    Weights are in standardized units: one unit per column standard deviation
    on the training cells. Zero-variance columns are dropped.
    """
    if not signals:
        raise ValueError("need at least one factor")
    if not lambda_grid:
        raise ValueError("lambda_grid must be non-empty")
    if any(l < 0 for l in lambda_grid):
        raise ValueError("lambda values must be >= 0")
    ids = list(range(1, len(signals) + 1)) if ids is None else list(ids)
    train, valid = _split_masks(target.shape[0], split)
    X, y, _, _ = design_matrix(signals, target, train)
    if X.shape[0] < 2:
        raise ValueError("too few training cells")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 0
    for j in np.nonzero(~live)[0]:
        log.info("dropping factor %s: zero variance on the training cells", ids[j])
    Xs = (X[:, live] - mu[live]) / sd[live]
    ys = (y - y.mean()) / y.std() if y.std() > 0 else y - y.mean()
    Uv = np.stack([np.nan_to_num(rank_standardize(s.values), nan=0.0) for s in signals], axis=-1)
    Uv = Uv[valid]
    path = []
    best = None
    warm = None
    for lam in lambda_grid:
        b = lasso_cd(Xs, ys, float(lam), tol=tol, beta0=warm)
        warm = b
        full = np.zeros(len(signals))
        full[live] = b
        val_ic = float("nan")
        if np.any(full != 0):
            pred = ((Uv[..., live] - mu[live]) / sd[live]) @ b
            series = ic_series(target.with_values(_pad(pred, valid, target.shape)), target)
            vals = series.values[valid]
            vals = vals[~np.isnan(vals)]
            val_ic = float(vals.mean()) if vals.size else float("nan")
        path.append({"lambda": float(lam), "nonzero": int(np.count_nonzero(full)), "valid_ic": val_ic, "weights": full})
        score = val_ic if np.isfinite(val_ic) else -np.inf
        if best is None or score > best[0]:
            best = (score, float(lam), full)
    _, lam, w = best
    nz = [j for j in np.argsort(-np.abs(w), kind="stable") if w[j] != 0]
    report = [{"rank": r + 1, "factor_id": ids[j], "coefficient": float(w[j])} for r, j in enumerate(nz)]
    return LassoResult(w, [ids[j] for j in nz], lam, path, report, mu, sd)


def _pad(pred_valid: np.ndarray, valid: np.ndarray, shape) -> np.ndarray:
    out = np.full(shape, np.nan)
    out[valid] = pred_valid
    return out


# ---------------------------------------------------------------- stepwise


def _combined_icir(signals, ics, target) -> tuple[float, float]:
    comb = combine_equal(signals, ics).signal
    series = ic_series(comb, target)
    try:
        ir = icir(series)
    except (ValueError, UndefinedResultError):
        ir = float("-inf")
    return series.mean(), ir


@dataclass
class StepwiseResult:
    selected: list[int]
    trajectory: list[dict]


def select_stepwise(
    signals: Sequence[SignalMatrix],
    target: SignalMatrix,
    max_steps: int,
    ids: Sequence[int] | None = None,
    train_ics: Sequence[float] | None = None,
) -> StepwiseResult:
    """Greedy forward selection on the ICIR of the equal-weight combination.

    Step one takes the best standalone factor; each later step adds the
    candidate giving the highest combined ICIR, stopping when none strictly
    improves it. Ties go to the earliest candidate.
    """
    if not signals:
        raise ValueError("empty candidate list")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    ids = list(range(1, len(signals) + 1)) if ids is None else list(ids)
    ind_ic = [ic_series(s, target).mean() for s in signals]
    ics = list(train_ics) if train_ics is not None else [c if np.isfinite(c) else 0.0 for c in ind_ic]
    chosen: list[int] = []
    traj: list[dict] = []
    current = float("-inf")
    for step in range(1, max_steps + 1):
        best = None
        for j in range(len(signals)):
            if j in chosen:
                continue
            trial = chosen + [j]
            cic, ir = _combined_icir([signals[k] for k in trial], [ics[k] for k in trial], target)
            if best is None or ir > best[2]:
                best = (j, cic, ir)
        if best is None or not best[2] > current or not np.isfinite(best[2]):
            break
        j, cic, ir = best
        traj.append({
            "step": step,
            "factor_id": ids[j],
            "ic": float(ind_ic[j]),
            "combined_ic": float(cic),
            "icir": float(ir),
            "delta_icir": 0.0 if not chosen else float(ir - current),
        })
        chosen.append(j)
        current = ir
    return StepwiseResult([ids[j] for j in chosen], traj)


# ----------------------------------------------------------------- reports

LASSO_COLUMNS = ("rank", "factor_id", "coefficient")
STEPWISE_COLUMNS = ("step", "factor_id", "ic", "combined_ic", "icir", "delta_icir")


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def export_design_csv(
    signals: Sequence[SignalMatrix], target: SignalMatrix, path: Union[str, Path], ids: Sequence[int] | None = None
) -> None:
    """Stacked design matrix for an external learner:
    ``time,asset,f_<id>...,target``."""
    ids = list(range(1, len(signals) + 1)) if ids is None else list(ids)
    X, y, t_idx, a_idx = design_matrix(signals, target)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "asset"] + [f"f_{i:03d}" for i in ids] + ["target"])
        for r in range(X.shape[0]):
            w.writerow(
                [int(target.timestamps[t_idx[r]]), target.assets[a_idx[r]]]
                + [repr(float(v)) for v in X[r]]
                + [repr(float(y[r]))]
            )
