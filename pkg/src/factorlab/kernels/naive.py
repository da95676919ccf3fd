"""Reference backend: rolling and cross-sectional operators written straight
from their definitions with vectorized numpy over explicit windows.

Window reductions accumulate oldest-to-newest, one window position at a time.
The optimized backend follows the same accumulation order so that both agree
to the last bit on moment statistics.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .common import window_incomplete

_CHUNK_CELLS = 1 << 20


def _rolling(x: np.ndarray, n: int, reduce, *, y: np.ndarray | None = None) -> np.ndarray:
    """Apply ``reduce(window)`` where window has shape (rows, M, n), chunked
    over time; incomplete windows become missing."""
    T, M = x.shape
    out = np.full((T, M), np.nan)
    if n > T:
        return out
    wx = sliding_window_view(x, n, axis=0)
    wy = sliding_window_view(y, n, axis=0) if y is not None else None
    rows = max(1, _CHUNK_CELLS // max(1, M * n))
    with np.errstate(all="ignore"):
        for a in range(0, T - n + 1, rows):
            b = min(a + rows, T - n + 1)
            if wy is None:
                out[n - 1 + a: n - 1 + b] = reduce(wx[a:b])
            else:
                out[n - 1 + a: n - 1 + b] = reduce(wx[a:b], wy[a:b])
    bad = window_incomplete(x, n)
    if y is not None:
        bad |= window_incomplete(y, n)
    out[bad] = np.nan
    return out


def _wsum(w):
    s = np.zeros(w.shape[:-1])
    for k in range(w.shape[-1]):
        s += w[..., k]
    return s


def _wmean(w):
    return _wsum(w) / w.shape[-1]


def _central_sums(w, powers):
    n = w.shape[-1]
    m = _wsum(w) / n
    m2 = np.zeros(w.shape[:-1])
    m3 = np.zeros(w.shape[:-1]) if 3 in powers else None
    m4 = np.zeros(w.shape[:-1]) if 4 in powers else None
    for k in range(n):
        d = w[..., k] - m
        d2 = d * d
        m2 += d2
        if m3 is not None:
            m3 += d2 * d
        if m4 is not None:
            m4 += d2 * d2
    return m2, m3, m4


def mean(x, n):
    return _rolling(x, n, _wmean)


def wsum(x, n):
    return _rolling(x, n, _wsum)


def product(x, n):
    def red(w):
        p = np.ones(w.shape[:-1])
        for k in range(w.shape[-1]):
            p *= w[..., k]
        return p

    return _rolling(x, n, red)


def var(x, n):
    return _rolling(x, n, lambda w: _central_sums(w, (2,))[0] / (w.shape[-1] - 1))


def std(x, n):
    return _rolling(x, n, lambda w: np.sqrt(_central_sums(w, (2,))[0] / (w.shape[-1] - 1)))


def skew(x, n):
    def red(w):
        m2, m3, _ = _central_sums(w, (2, 3))
        v = m2 / n
        g1 = (m3 / n) / (v * np.sqrt(v))
        out = g1 * (np.sqrt(n * (n - 1.0)) / (n - 2.0))
        out[m2 == 0] = np.nan
        return out

    return _rolling(x, n, red)


def kurt(x, n):
    def red(w):
        m2, _, m4 = _central_sums(w, (2, 4))
        v = m2 / n
        g2 = (m4 / n) / (v * v) - 3.0
        out = ((n + 1.0) * g2 + 6.0) * ((n - 1.0) / ((n - 2.0) * (n - 3.0)))
        out[m2 == 0] = np.nan
        return out

    return _rolling(x, n, red)


def median(x, n):
    return _rolling(x, n, lambda w: np.median(w, axis=-1))


def corr(x, y, n):
    def red(wx, wy):
        mx = _wsum(wx) / n
        my = _wsum(wy) / n
        sxy = np.zeros(mx.shape)
        sxx = np.zeros(mx.shape)
        syy = np.zeros(mx.shape)
        for k in range(n):
            dx = wx[..., k] - mx
            dy = wy[..., k] - my
            sxy += dx * dy
            sxx += dx * dx
            syy += dy * dy
        r = sxy / np.sqrt(sxx * syy)
        r[(sxx == 0) | (syy == 0)] = np.nan
        return np.clip(r, -1.0, 1.0)

    return _rolling(x, n, red, y=y)


def ts_rank(x, n):
    def red(w):
        cur = w[..., -1]
        less = np.zeros(cur.shape)
        eq = np.zeros(cur.shape)
        for k in range(n):
            less += w[..., k] < cur
            eq += w[..., k] == cur
        return (less + (eq + 1.0) / 2.0) / n

    return _rolling(x, n, red)


def ts_max(x, n):
    return _rolling(x, n, lambda w: w.max(axis=-1))


def ts_min(x, n):
    return _rolling(x, n, lambda w: w.min(axis=-1))


def ts_argmax(x, n):
    # bars since the most recent window maximum
    return _rolling(x, n, lambda w: np.argmax(w[..., ::-1], axis=-1).astype(np.float64))


def ts_argmin(x, n):
    return _rolling(x, n, lambda w: np.argmin(w[..., ::-1], axis=-1).astype(np.float64))


def wma(x, n):
    def red(w):
        s = np.zeros(w.shape[:-1])
        for k in range(n):
            s += (k + 1.0) * w[..., k]
        return s / (n * (n + 1.0) / 2.0)

    return _rolling(x, n, red)


def _regression(w, what):
    n = w.shape[-1]
    tbar = (n - 1.0) / 2.0
    ybar = _wsum(w) / n
    sxy = np.zeros(ybar.shape)
    syy = np.zeros(ybar.shape)
    sxx = 0.0
    for k in range(n):
        dt = k - tbar
        dy = w[..., k] - ybar
        sxy += dt * dy
        syy += dy * dy
        sxx += dt * dt
    slope = sxy / sxx
    if what == "slope":
        return slope
    if what == "resi":
        return (w[..., -1] - ybar) - slope * (n - 1.0 - tbar)
    r2 = (sxy * sxy) / (sxx * syy)
    r2[syy == 0] = 0.0
    return np.clip(r2, 0.0, 1.0)


def slope(x, n):
    return _rolling(x, n, lambda w: _regression(w, "slope"))


def rsquare(x, n):
    return _rolling(x, n, lambda w: _regression(w, "rsquare"))


def resi(x, n):
    return _rolling(x, n, lambda w: _regression(w, "resi"))


def ema(x, n):
    """Exponential average, alpha = 2 / (n + 1), seeded with the first present
    value of each unbroken run; emitted once the run covers ``n`` bars."""
    T, M = x.shape
    alpha = 2.0 / (n + 1.0)
    beta = 1.0 - alpha
    out = np.full((T, M), np.nan)
    state = np.full(M, np.nan)
    run = np.zeros(M, dtype=np.int64)
    for t in range(T):
        xt = x[t]
        present = ~np.isnan(xt)
        fresh = present & (run == 0)
        cont = present & (run > 0)
        state[fresh] = xt[fresh]
        state[cont] = alpha * xt[cont] + beta * state[cont]
        run = np.where(present, run + 1, 0)
        state[~present] = np.nan
        ok = run >= n
        out[t, ok] = state[ok]
    return out


def cs_rank(x):
    """Average rank among present assets in each row, divided by their count."""
    T, M = x.shape
    out = np.full((T, M), np.nan)
    count = (~np.isnan(x)).sum(axis=1).astype(np.float64)
    rows = max(1, _CHUNK_CELLS // max(1, M * M))
    for a in range(0, T, rows):
        b = min(a + rows, T)
        blk = x[a:b]
        with np.errstate(invalid="ignore"):
            less = (blk[:, None, :] < blk[:, :, None]).sum(axis=2)
            eq = (blk[:, None, :] == blk[:, :, None]).sum(axis=2)
            out[a:b] = (less + (eq + 1.0) / 2.0) / count[a:b, None]
    out[np.isnan(x)] = np.nan
    return out


ROLLING = {
    "Mean": mean,
    "SMA": mean,
    "Sum": wsum,
    "Product": product,
    "Std": std,
    "Var": var,
    "Skew": skew,
    "Kurt": kurt,
    "Med": median,
    "TsRank": ts_rank,
    "TsMax": ts_max,
    "TsMin": ts_min,
    "TsArgMax": ts_argmax,
    "TsArgMin": ts_argmin,
    "TsDecay": wma,
    "WMA": wma,
    "EMA": ema,
    "Slope": slope,
    "Rsquare": rsquare,
    "Resi": resi,
}

ROLLING2 = {"Corr": corr}

CROSS = {"CsRank": cs_rank}
