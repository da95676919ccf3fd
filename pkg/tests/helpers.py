"""Shared builders and brute-force oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np

from factorlab.panel import SYNTH_EPOCH, SignalMatrix, panel_from_arrays


def sig(values, timestamps=None) -> SignalMatrix:
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    T, M = v.shape
    ts = np.asarray(timestamps if timestamps is not None else SYNTH_EPOCH + 600 * np.arange(T), dtype=np.int64)
    return SignalMatrix(v, ts, tuple(f"A{j}" for j in range(M)))


def close_panel(close):
    close = np.atleast_2d(np.asarray(close, dtype=np.float64))
    T, M = close.shape
    return panel_from_arrays(SYNTH_EPOCH + 600 * np.arange(T), [f"A{j}" for j in range(M)], {"close": close})


def brute_avg_ranks(xs):
    """1-based ranks with ties averaged, by counting."""
    out = []
    for x in xs:
        less = sum(1 for y in xs if y < x)
        eq = sum(1 for y in xs if y == x)
        out.append(less + (eq + 1) / 2.0)
    return out


def brute_pearson(a, b):
    n = len(a)
    ma = math.fsum(a) / n
    mb = math.fsum(b) / n
    sab = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = math.fsum((x - ma) ** 2 for x in a)
    sbb = math.fsum((y - mb) ** 2 for y in b)
    if saa == 0 or sbb == 0:
        return math.nan
    return sab / math.sqrt(saa * sbb)


def brute_spearman_row(a, b):
    pairs = [(x, y) for x, y in zip(a, b) if not (math.isnan(x) or math.isnan(y))]
    if len(pairs) < 3:
        return math.nan
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        return math.nan
    return brute_pearson(brute_avg_ranks(xs), brute_avg_ranks(ys))


def brute_ic(a, b):
    return np.array([brute_spearman_row(list(ra), list(rb)) for ra, rb in zip(a, b)])


def random_tied_matrix(rng, T, M, missing=0.15, levels=6):
    """Values drawn from a few levels so ties are common, with missing cells."""
    v = rng.integers(0, levels, size=(T, M)).astype(np.float64) + rng.choice([0.0, 0.5], size=(T, M))
    v[rng.random((T, M)) < missing] = np.nan
    return v


def random_panel(rng, T=60, M=7, missing=0.05, scale=None):
    """Small OHLCV panel with scattered missing cells and occasional ties."""
    from factorlab.panel import RAW_FIELDS

    scale = float(rng.choice([1.0, 1e3, 1e-2])) if scale is None else scale
    c = scale * np.exp(np.cumsum(rng.normal(0, 0.02, (T, M)), axis=0))
    c = np.where(rng.random((T, M)) < 0.05, np.round(c, 1) + scale, c)  # ties
    o = np.vstack([c[:1], c[:-1]])
    h = np.maximum(o, c) * (1 + rng.random((T, M)) * 0.01)
    lo = np.minimum(o, c) * (1 - rng.random((T, M)) * 0.01)
    v = rng.lognormal(8, 1, (T, M))
    vw = (o + c + h + lo) / 4
    arrays = dict(zip(RAW_FIELDS, (o, h, lo, c, v, v * vw, vw)))
    holes = rng.random((T, M)) < missing
    for a in arrays.values():
        a[holes] = np.nan
    return panel_from_arrays(SYNTH_EPOCH + 600 * np.arange(T), [f"A{j}" for j in range(M)], arrays)


def every_operator_exprs():
    """One expression per registry operator, applied to real fields."""
    from factorlab.dsl import Call, Field
    from factorlab.registry import BOOL, INT, REGISTRY

    c, o, v = Field("close"), Field("open"), Field("volume")
    cond = Call("Greater", (c, o))
    out = []
    for spec in REGISTRY:
        args = []
        for i, kind in enumerate(spec.inputs):
            if kind == BOOL:
                args.append(cond if i == 0 else Call("Less", (c, Field("vwap"))))
            else:
                args.append((c, v, o)[i])
        params = []
        for kind, minimum in spec.params:
            params.append(max(5, int(minimum)) if kind == INT else 2.0)
        node = Call(spec.name, tuple(args), tuple(params))
        if spec.output == BOOL:
            node = Call("IfElse", (node, c, Call("Neg", (v,))))
        out.append(node)
    return out


def brute_icir(values):
    xs = [x for x in values if not math.isnan(x)]
    n = len(xs)
    m = math.fsum(xs) / n
    sd = math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (n - 1))
    return m / sd


def brute_factor_corr(a, b):
    rs = [r for r in brute_ic(a, b) if not math.isnan(r)]
    return math.fsum(rs) / len(rs)


def brute_buckets(row, q):
    """Bucket per present cell via explicit sorting; -1 elsewhere."""
    idx = [j for j, x in enumerate(row) if not math.isnan(x)]
    out = [-1] * len(row)
    k = len(idx)
    if k < q:
        return out
    ordered = sorted(idx, key=lambda j: (row[j], j))
    for i, j in enumerate(ordered):
        out[j] = (i * q) // k
    return out


def brute_turnover(values, q):
    rows = [brute_buckets(list(r), q) for r in values]
    fracs = []
    for prev, cur in zip(rows, rows[1:]):
        if max(prev) < 0 or max(cur) < 0:
            continue
        universe = sum(1 for p, c in zip(prev, cur) if p >= 0 or c >= 0)
        changed = sum(1 for p, c in zip(prev, cur) if (p == q - 1) != (c == q - 1) or (p == 0) != (c == 0))
        fracs.append(changed / universe)
    return sum(fracs) / len(fracs)


def random_metric_case(rng):
    """A random (signal, target) pair of small shape with ties and holes."""
    T = int(rng.integers(2, 12))
    M = int(rng.integers(3, 15))
    a = random_tied_matrix(rng, T, M, missing=float(rng.uniform(0, 0.4)), levels=int(rng.integers(2, 8)))
    b = rng.normal(size=(T, M))
    b = np.where(rng.random((T, M)) < 0.3, np.round(b, 0), b)
    b[rng.random((T, M)) < float(rng.uniform(0, 0.3))] = np.nan
    return a, b


def stats_with_fitness(fit):
    from factorlab.metrics import FactorStats

    return FactorStats(fit, abs(fit), math.nan, math.nan, abs(fit))


def make_candidate(name, fitness, values, correlations=None, formula=None):
    from factorlab.dsl import parse
    from factorlab.library import Candidate

    expr = parse(formula or f"Mean($close, {abs(hash(name)) % 40 + 2})")
    return Candidate(name, expr, stats_with_fitness(fitness), sig(values), correlations)


def blend_to_corr(base, noise, lo, hi):
    """Mix ``base`` with ``noise`` until the time-averaged rank correlation
    lands in [lo, hi]; returns the blended matrix."""
    from factorlab.metrics import factor_corr

    for w in np.linspace(0.0, 3.0, 601):
        mixed = base + w * noise
        r = factor_corr(sig(base), sig(mixed))
        if lo <= r <= hi:
            return mixed
    raise AssertionError("no blend weight hits the requested band")


def stub_generator(tmp_path, formulas, *, done=True, sleep=0.0, name="stub.py"):
    """Write a tiny generator process that answers one request with
    ``formulas`` and returns an endpoint launching it."""
    import json
    import sys

    from factorlab.generator import ExternalEndpoint

    lines = [json.dumps({"type": "candidate", "formula": f}) if isinstance(f, str) else f["raw"] for f in formulas]
    script = tmp_path / name
    script.write_text(
        "import sys, time, json\n"
        "req = json.loads(sys.stdin.readline())\n"
        "assert req['type'] == 'generate'\n"
        f"time.sleep({sleep})\n"
        f"for line in {lines!r}:\n"
        "    print(line, flush=True)\n"
        + ("print(json.dumps({'type': 'done'}), flush=True)\n" if done else "")
    )
    return ExternalEndpoint((sys.executable, str(script)), timeout=10.0)


def brute_centred_ranks(values):
    """(2r - k - 1) / (2k) per row over present cells, by counting."""
    out = np.full(np.shape(values), np.nan)
    for t, row in enumerate(values):
        idx = [j for j, x in enumerate(row) if not math.isnan(x)]
        k = len(idx)
        ranks = brute_avg_ranks([row[j] for j in idx])
        for j, r in zip(idx, ranks):
            out[t, j] = (2 * r - k - 1) / (2 * k)
    return out


def brute_centred_ranks_exact(values):
    """Centred ranks as exact fractions, by counting."""
    from fractions import Fraction

    out = np.full(np.shape(values), None, dtype=object)
    for t, row in enumerate(values):
        idx = [j for j, x in enumerate(row) if not math.isnan(x)]
        k = len(idx)
        for j in idx:
            less = sum(1 for i in idx if row[i] < row[j])
            eq = sum(1 for i in idx if row[i] == row[j])
            out[t, j] = Fraction(2 * less + eq + 1 - k - 1, 2 * k)
    return out


def brute_equal_combo(values_list, ics, weights=None):
    """Signed weighted mean of centred ranks over the factors present at each
    cell; with equal weights the arithmetic is exact."""
    if weights is None:
        us = [brute_centred_ranks_exact(v) for v in values_list]
        T, M = np.shape(values_list[0])
        out = np.full((T, M), np.nan)
        for t in range(T):
            for j in range(M):
                parts = [(-1 if c < 0 else 1) * u[t, j] for u, c in zip(us, ics) if u[t, j] is not None]
                if parts:
                    out[t, j] = float(sum(parts) / len(parts))
        return out
    us = [brute_centred_ranks(v) for v in values_list]
    T, M = np.shape(values_list[0])
    out = np.full((T, M), np.nan)
    for t in range(T):
        for j in range(M):
            num = den = 0.0
            for u, c, w in zip(us, ics, weights):
                if w == 0 or math.isnan(u[t, j]):
                    continue
                num += w * (-1.0 if c < 0 else 1.0) * u[t, j]
                den += w
            if den > 0:
                out[t, j] = num / den
    return out


def lasso_instance(rng, p=10, T=60, M=20, beta=None):
    from factorlab.portfolio import rank_standardize

    base = [rng.normal(size=(T, M)) for _ in range(p)]
    beta = rng.normal(size=p) * (rng.random(p) < 0.6) if beta is None else beta
    y = sum(b * rank_standardize(x) for b, x in zip(beta, base)) + 0.3 * rng.normal(size=(T, M))
    return [sig(x) for x in base], sig(y)


def standardized(signals, target, rows):
    from factorlab.portfolio import design_matrix

    X, y, _, _ = design_matrix(signals, target, rows)
    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    return Xs, (y - y.mean()) / y.std()


def oracle_stepwise(values, target, max_steps):
    """Every remaining candidate tried at every step; ICIR of the
    equal-weight combination computed from scratch."""
    ics = []
    for v in values:
        s = [x for x in brute_ic(v, target) if not math.isnan(x)]
        ics.append(sum(s) / len(s))
    chosen, irs = [], []
    current = -math.inf
    for _ in range(max_steps):
        scores = []
        for j in range(len(values)):
            if j in chosen:
                continue
            trial = chosen + [j]
            combo = brute_equal_combo([values[k] for k in trial], [ics[k] for k in trial])
            series = brute_ic(combo, target)
            scores.append((brute_icir(series), j))
        if not scores:
            break
        best_ir = max(s for s, _ in scores)
        j = min(j for s, j in scores if s == best_ir)
        if not best_ir > current:
            break
        chosen.append(j)
        irs.append(best_ir)
        current = best_ir
    return chosen, irs
