"""Compiled backend (numba).

Techniques per operator family:

* moment statistics: fused single sweep per bar over a cache-resident window
  block, accumulating in the same order as the reference backend;
* rolling max/min/argmax/argmin: monotonic deque, O(1) amortized per bar;
* rolling median and time-series rank: sorted window buffer with binary
  search insert/delete (an order-statistic array);
* cross-sectional rank: one sort per bar with tie-group averaging.

Missing values are tracked with a running count per asset so that any window
containing one yields missing.
"""

from __future__ import annotations

import numba as nb
import numpy as np


_jit = nb.njit(cache=True, nogil=True)


# ---------------------------------------------------------------- moments

@_jit
def _mean_kernel(x, n, out):
    T, M = x.shape
    s = np.empty(M)
    for t in range(n - 1, T):
        s[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                s[m] += x[k, m]
        for m in range(M):
            out[t, m] = s[m] / n


@_jit
def _sum_kernel(x, n, out):
    T, M = x.shape
    s = np.empty(M)
    for t in range(n - 1, T):
        s[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                s[m] += x[k, m]
        for m in range(M):
            out[t, m] = s[m]


@_jit
def _product_kernel(x, n, out):
    T, M = x.shape
    p = np.empty(M)
    for t in range(n - 1, T):
        p[:] = 1.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                p[m] *= x[k, m]
        for m in range(M):
            out[t, m] = p[m]


@_jit
def _window_means(x, t, n, s):
    M = x.shape[1]
    s[:] = 0.0
    for k in range(t - n + 1, t + 1):
        for m in range(M):
            s[m] += x[k, m]
    for m in range(M):
        s[m] = s[m] / n


@_jit
def _var_kernel(x, n, take_sqrt, out):
    T, M = x.shape
    mu = np.empty(M)
    m2 = np.empty(M)
    for t in range(n - 1, T):
        _window_means(x, t, n, mu)
        m2[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                d = x[k, m] - mu[m]
                m2[m] += d * d
        if take_sqrt:
            for m in range(M):
                out[t, m] = np.sqrt(m2[m] / (n - 1))
        else:
            for m in range(M):
                out[t, m] = m2[m] / (n - 1)


@_jit
def _skew_kernel(x, n, out):
    T, M = x.shape
    mu = np.empty(M)
    m2 = np.empty(M)
    m3 = np.empty(M)
    c = np.sqrt(n * (n - 1.0)) / (n - 2.0)
    for t in range(n - 1, T):
        _window_means(x, t, n, mu)
        m2[:] = 0.0
        m3[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                d = x[k, m] - mu[m]
                d2 = d * d
                m2[m] += d2
                m3[m] += d2 * d
        for m in range(M):
            if m2[m] == 0.0:
                out[t, m] = np.nan
            else:
                v = m2[m] / n
                g1 = (m3[m] / n) / (v * np.sqrt(v))
                out[t, m] = g1 * c


@_jit
def _kurt_kernel(x, n, out):
    T, M = x.shape
    mu = np.empty(M)
    m2 = np.empty(M)
    m4 = np.empty(M)
    c = (n - 1.0) / ((n - 2.0) * (n - 3.0))
    for t in range(n - 1, T):
        _window_means(x, t, n, mu)
        m2[:] = 0.0
        m4[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                d = x[k, m] - mu[m]
                d2 = d * d
                m2[m] += d2
                m4[m] += d2 * d2
        for m in range(M):
            if m2[m] == 0.0:
                out[t, m] = np.nan
            else:
                v = m2[m] / n
                g2 = (m4[m] / n) / (v * v) - 3.0
                out[t, m] = ((n + 1.0) * g2 + 6.0) * c


@_jit
def _wma_kernel(x, n, out):
    T, M = x.shape
    s = np.empty(M)
    denom = n * (n + 1.0) / 2.0
    for t in range(n - 1, T):
        s[:] = 0.0
        for j in range(n):
            k = t - n + 1 + j
            w = j + 1.0
            for m in range(M):
                s[m] += w * x[k, m]
        for m in range(M):
            out[t, m] = s[m] / denom


@_jit
def _regression_kernel(x, n, mode, out):
    # mode: 0 slope, 1 rsquare, 2 resi
    T, M = x.shape
    s = np.empty(M)
    yb = np.empty(M)
    sxy = np.empty(M)
    syy = np.empty(M)
    tbar = (n - 1.0) / 2.0
    for t in range(n - 1, T):
        s[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                s[m] += x[k, m]
        for m in range(M):
            yb[m] = s[m] / n
        sxy[:] = 0.0
        syy[:] = 0.0
        sxx = 0.0
        for j in range(n):
            k = t - n + 1 + j
            dt = j - tbar
            for m in range(M):
                dy = x[k, m] - yb[m]
                sxy[m] += dt * dy
                syy[m] += dy * dy
            sxx += dt * dt
        for m in range(M):
            b = sxy[m] / sxx
            if mode == 0:
                out[t, m] = b
            elif mode == 2:
                out[t, m] = (x[t, m] - yb[m]) - b * (n - 1.0 - tbar)
            elif syy[m] == 0.0:
                out[t, m] = 0.0
            else:
                r2 = (sxy[m] * sxy[m]) / (sxx * syy[m])
                out[t, m] = np.nan if np.isnan(r2) else min(max(r2, 0.0), 1.0)


@_jit
def _corr_kernel(x, y, n, out):
    T, M = x.shape
    sx = np.empty(M)
    sy = np.empty(M)
    mx = np.empty(M)
    my = np.empty(M)
    sxy = np.empty(M)
    sxx = np.empty(M)
    syy = np.empty(M)
    for t in range(n - 1, T):
        sx[:] = 0.0
        sy[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                sx[m] += x[k, m]
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                sy[m] += y[k, m]
        for m in range(M):
            mx[m] = sx[m] / n
            my[m] = sy[m] / n
        sxy[:] = 0.0
        sxx[:] = 0.0
        syy[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                dx = x[k, m] - mx[m]
                dy = y[k, m] - my[m]
                sxy[m] += dx * dy
                sxx[m] += dx * dx
                syy[m] += dy * dy
        for m in range(M):
            if sxx[m] == 0.0 or syy[m] == 0.0:
                out[t, m] = np.nan
            else:
                r = sxy[m] / np.sqrt(sxx[m] * syy[m])
                out[t, m] = np.nan if np.isnan(r) else min(max(r, -1.0), 1.0)


# ------------------------------------------------------- order statistics

@_jit
def _bisect_left(buf, cnt, v):
    lo = 0
    hi = cnt
    while lo < hi:
        mid = (lo + hi) >> 1
        if buf[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


@_jit
def _bisect_right(buf, cnt, v):
    lo = 0
    hi = cnt
    while lo < hi:
        mid = (lo + hi) >> 1
        if v < buf[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


@_jit
def _sorted_window_kernel(xt, n, mode, out):
    # xt is (M, T); mode 0 median, 1 ts-rank.
    # buf holds the present window values in ascending order.
    M, T = xt.shape
    buf = np.empty(n + 1)
    h = n // 2
    odd = n % 2 == 1
    for m in range(M):
        row = xt[m]
        cnt = 0
        nans = 0
        for t in range(T):
            if t >= n:
                old = row[t - n]
                if old != old:
                    nans -= 1
                else:
                    pos = _bisect_left(buf, cnt, old)
                    cnt -= 1
                    for i in range(pos, cnt):
                        buf[i] = buf[i + 1]
            v = row[t]
            if v != v:
                nans += 1
                continue
            pos = _bisect_right(buf, cnt, v)
            for i in range(cnt, pos, -1):
                buf[i] = buf[i - 1]
            buf[pos] = v
            cnt += 1
            if t < n - 1 or nans > 0:
                continue
            if mode == 0:
                if odd:
                    out[m, t] = buf[h]
                else:
                    out[m, t] = (buf[h - 1] + buf[h]) / 2.0
            else:
                lo = _bisect_left(buf, cnt, v)
                out[m, t] = (lo + ((pos + 1 - lo) + 1.0) / 2.0) / n


@_jit
def _deque_kernel(xt, n, want_max, want_arg, out):
    # monotonic deque of indices; ties keep the most recent index at the front
    M, T = xt.shape
    dq = np.empty(T, dtype=np.int64)
    for m in range(M):
        head = 0
        tail = 0
        nans = 0
        for t in range(T):
            v = xt[m, t]
            if np.isnan(v):
                nans += 1
            else:
                if want_max:
                    while tail > head and xt[m, dq[tail - 1]] <= v:
                        tail -= 1
                else:
                    while tail > head and xt[m, dq[tail - 1]] >= v:
                        tail -= 1
                dq[tail] = t
                tail += 1
            if t >= n and np.isnan(xt[m, t - n]):
                nans -= 1
            while tail > head and dq[head] <= t - n:
                head += 1
            if t < n - 1 or nans > 0:
                continue
            if want_arg:
                out[m, t] = t - dq[head]
            else:
                out[m, t] = xt[m, dq[head]]


@_jit
def _ema_kernel(xt, n, out):
    M, T = xt.shape
    alpha = 2.0 / (n + 1.0)
    beta = 1.0 - alpha
    for m in range(M):
        run = 0
        s = np.nan
        for t in range(T):
            v = xt[m, t]
            if np.isnan(v):
                run = 0
                continue
            if run == 0:
                s = v
            else:
                s = alpha * v + beta * s
            run += 1
            if run >= n:
                out[m, t] = s


@_jit
def _cs_rank_kernel(x, out):
    T, M = x.shape
    vals = np.empty(M)
    idx = np.empty(M, dtype=np.int64)
    for t in range(T):
        cnt = 0
        for m in range(M):
            if not np.isnan(x[t, m]):
                vals[cnt] = x[t, m]
                idx[cnt] = m
                cnt += 1
        if cnt == 0:
            continue
        order = np.argsort(vals[:cnt])
        i = 0
        while i < cnt:
            j = i + 1
            v = vals[order[i]]
            while j < cnt and vals[order[j]] == v:
                j += 1
            r = (i + ((j - i) + 1.0) / 2.0) / cnt
            for k in range(i, j):
                out[t, idx[order[k]]] = r
            i = j


@_jit
def _mask_incomplete(x, n, out):
    # running per-asset count of missing values in the trailing window
    T, M = x.shape
    cnt = np.zeros(M, dtype=np.int64)
    for t in range(T):
        for m in range(M):
            if x[t, m] != x[t, m]:
                cnt[m] += 1
            if t >= n and x[t - n, m] != x[t - n, m]:
                cnt[m] -= 1
            if t < n - 1 or cnt[m] > 0:
                out[t, m] = np.nan


@_jit
def _ts_rank_count_kernel(x, n, out):
    T, M = x.shape
    less = np.empty(M)
    eq = np.empty(M)
    for t in range(n - 1, T):
        less[:] = 0.0
        eq[:] = 0.0
        for k in range(t - n + 1, t + 1):
            for m in range(M):
                less[m] += x[k, m] < x[t, m]
                eq[m] += x[k, m] == x[t, m]
        for m in range(M):
            out[t, m] = (less[m] + (eq[m] + 1.0) / 2.0) / n


@_jit
def _extreme_scan_kernel(x, n, want_max, want_arg, out):
    # ties resolve to the most recent bar, matching the deque
    T, M = x.shape
    best = np.empty(M)
    at = np.empty(M, dtype=np.int64)
    for t in range(n - 1, T):
        for m in range(M):
            best[m] = x[t - n + 1, m]
            at[m] = t - n + 1
        for k in range(t - n + 2, t + 1):
            for m in range(M):
                v = x[k, m]
                if (v >= best[m]) if want_max else (v <= best[m]):
                    best[m] = v
                    at[m] = k
        if want_arg:
            for m in range(M):
                out[t, m] = t - at[m]
        else:
            for m in range(M):
                out[t, m] = best[m]


# ---------------------------------------------------------------- wrappers

def _rowwise(kernel, *extra):
    def op(x, n):
        T, M = x.shape
        out = np.full((T, M), np.nan)
        if n <= T:
            x = np.ascontiguousarray(x)
            kernel(x, n, *extra, out)
            _mask_incomplete(x, n, out)
        return out

    return op


def _columnwise(kernel, *extra):
    def op(x, n):
        T, M = x.shape
        out = np.full((M, T), np.nan)
        if n <= T:
            kernel(np.ascontiguousarray(x.T), n, *extra, out)
        return np.ascontiguousarray(out.T)

    return op


def corr(x, y, n):
    T, M = x.shape
    out = np.full((T, M), np.nan)
    if n <= T:
        x = np.ascontiguousarray(x)
        y = np.ascontiguousarray(y)
        _corr_kernel(x, y, n, out)
        _mask_incomplete(x, n, out)
        _mask_incomplete(y, n, out)
    return out


def cs_rank(x):
    out = np.full(x.shape, np.nan)
    _cs_rank_kernel(np.ascontiguousarray(x), out)
    return out


_mean = _rowwise(_mean_kernel)
_ts_rank_sorted = _columnwise(_sorted_window_kernel, 1)
_ts_rank_count = _rowwise(_ts_rank_count_kernel)

# Below this window length a fused vectorized scan beats the sorted buffer
# and the deque.
SCAN_MAX_WINDOW = 64


def _extreme(want_max, want_arg):
    scan = _rowwise(_extreme_scan_kernel, want_max, want_arg)
    deque = _columnwise(_deque_kernel, want_max, want_arg)

    def op(x, n):
        return scan(x, n) if n <= SCAN_MAX_WINDOW else deque(x, n)

    return op


def _ts_rank(x, n):
    if n <= SCAN_MAX_WINDOW:
        return _ts_rank_count(x, n)
    return _ts_rank_sorted(x, n)
_wma = _rowwise(_wma_kernel)

ROLLING = {
    "Mean": _mean,
    "SMA": _mean,
    "Sum": _rowwise(_sum_kernel),
    "Product": _rowwise(_product_kernel),
    "Var": _rowwise(_var_kernel, False),
    "Std": _rowwise(_var_kernel, True),
    "Skew": _rowwise(_skew_kernel),
    "Kurt": _rowwise(_kurt_kernel),
    "Med": _columnwise(_sorted_window_kernel, 0),
    "TsRank": _ts_rank,
    "TsMax": _extreme(True, False),
    "TsMin": _extreme(False, False),
    "TsArgMax": _extreme(True, True),
    "TsArgMin": _extreme(False, True),
    "TsDecay": _wma,
    "WMA": _wma,
    "EMA": _columnwise(_ema_kernel),
    "Slope": _rowwise(_regression_kernel, 0),
    "Rsquare": _rowwise(_regression_kernel, 1),
    "Resi": _rowwise(_regression_kernel, 2),
}

ROLLING2 = {"Corr": corr}

CROSS = {"CsRank": cs_rank}
