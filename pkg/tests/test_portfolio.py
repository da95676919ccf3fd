import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorlab.metrics import ic_series
from factorlab.portfolio import (
    LASSO_COLUMNS,
    STEPWISE_COLUMNS,
    combine_equal,
    combine_ic_weighted,
    combine_orthogonal,
    export_design_csv,
    lasso_cd,
    lasso_gradient,
    rank_standardize,
    select_lasso,
    select_stepwise,
    write_rows_csv,
)

from helpers import (
    brute_centred_ranks,
    brute_equal_combo,
    lasso_instance,
    oracle_stepwise,
    random_tied_matrix,
    sig,
    standardized,
)


def same_ranks(a, b):
    np.testing.assert_array_equal(rank_standardize(a), rank_standardize(b))


class TestRankStandardize:
    def test_against_brute(self, rng):
        v = random_tied_matrix(rng, 12, 9, missing=0.2)
        np.testing.assert_allclose(rank_standardize(v), brute_centred_ranks(v), atol=1e-15)

    def test_range(self, rng):
        u = rank_standardize(rng.normal(size=(5, 7)))
        assert (np.abs(u) < 0.5).all()
        np.testing.assert_allclose(u.sum(axis=1), 0, atol=1e-14)


class TestEqual:
    def test_single_factor(self, rng):
        v = rng.normal(size=(10, 8))
        out = combine_equal([sig(v)], [0.05]).signal.values
        same_ranks(out, v)

    def test_negated_pair(self, rng):
        v = rng.normal(size=(20, 10))
        t = sig(v + rng.normal(size=v.shape))
        out = combine_equal([sig(v), sig(-v)], [0.04, -0.04]).signal
        np.testing.assert_allclose(out.values, rank_standardize(v), atol=1e-15)
        assert ic_series(out, t).mean() == pytest.approx(ic_series(sig(v), t).mean(), abs=1e-12)

    def test_three_signals_oracle(self, rng):
        vs = [random_tied_matrix(rng, 8, 7, missing=0.2) for _ in range(3)]
        ics = [0.03, -0.02, 0.0]
        got = combine_equal([sig(v) for v in vs], ics).signal.values
        np.testing.assert_allclose(got, brute_equal_combo(vs, ics), atol=1e-12)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            combine_equal([], [])
        with pytest.raises(ValueError):
            combine_equal([sig(np.ones((2, 3))), sig(np.ones((2, 4)))], [0.1, 0.1])


class TestICWeighted:
    def test_equal_ics(self, rng):
        vs = [sig(rng.normal(size=(6, 5))) for _ in range(3)]
        a = combine_ic_weighted(vs, [0.05, 0.05, -0.05]).signal.values
        b = combine_equal(vs, [0.05, 0.05, -0.05]).signal.values
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_zero_ic_ignored(self, rng):
        vs = [sig(rng.normal(size=(6, 5))) for _ in range(2)]
        out = combine_ic_weighted(vs, [0.05, 0.0])
        np.testing.assert_allclose(out.signal.values, rank_standardize(vs[0].values), atol=1e-15)

    def test_weights(self, rng):
        vs = [random_tied_matrix(rng, 8, 7, missing=0.2) for _ in range(2)]
        out = combine_ic_weighted([sig(v) for v in vs], [0.10, 0.05])
        assert out.weights == pytest.approx((2 / 3, 1 / 3))
        np.testing.assert_allclose(out.signal.values, brute_equal_combo(vs, [0.1, 0.05], [2 / 3, 1 / 3]), atol=1e-12)

    def test_all_zero(self, rng):
        with pytest.raises(ValueError):
            combine_ic_weighted([sig(rng.normal(size=(3, 3)))], [0.0])


def projection_oracle(v1, v2, s1, s2):
    """Per bar: centre and normalise both rank vectors, strip the first from
    the second, renormalise, and average the signed components."""
    u1, u2 = brute_centred_ranks(v1), brute_centred_ranks(v2)
    out = np.full(v1.shape, np.nan)
    for t in range(v1.shape[0]):
        m = ~(np.isnan(u1[t]) | np.isnan(u2[t]))
        a, b = u1[t, m] - u1[t, m].mean(), u2[t, m] - u2[t, m].mean()
        e1 = a / np.linalg.norm(a)
        b = b / np.linalg.norm(b)
        r = b - (b @ e1) * e1
        comps = [s1 * e1]
        if np.linalg.norm(r) >= 1e-10:
            comps.append(s2 * r / np.linalg.norm(r))
        out[t, m] = sum(comps) / len(comps)
    return out


class TestOrthogonal:
    def test_components_orthogonal(self, rng):
        base = rng.normal(size=(30, 12))
        vs = [sig(base + k * 0.5 * rng.normal(size=base.shape)) for k in range(5)]
        out = combine_orthogonal(vs, [0.05, 0.04, -0.03, 0.02, 0.01], keep_components=True)
        C = out.components
        for i in range(5):
            for j in range(i + 1, 5):
                assert np.nanmax(np.abs(np.nansum(C[i] * C[j], axis=1))) < 1e-8

    def test_duplicate_dropped(self, rng):
        v = rng.normal(size=(10, 8))
        out = combine_orthogonal([sig(v), sig(v.copy())], [0.05, 0.04], keep_components=True)
        assert np.all(np.nan_to_num(out.components[1]) == 0)
        same_ranks(out.signal.values, v)

    def test_projection_oracle(self, rng):
        v1 = random_tied_matrix(rng, 15, 9, missing=0.1)
        v2 = np.where(np.isnan(v1), rng.normal(size=v1.shape), v1 + rng.normal(size=v1.shape))
        v2[rng.random(v2.shape) < 0.1] = np.nan
        got = combine_orthogonal([sig(v1), sig(v2)], [0.06, -0.03]).signal.values
        np.testing.assert_allclose(got, projection_oracle(v1, v2, 1, -1), atol=1e-10)

    def test_order_by_abs_ic(self, rng):
        vs = [sig(rng.normal(size=(4, 5))) for _ in range(3)]
        assert combine_orthogonal(vs, [0.01, -0.05, 0.03]).order == (1, 2, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_combiners_rank_invariant(seed):
    rng = np.random.default_rng(seed)
    vs = [random_tied_matrix(rng, 10, 8, missing=0.15) for _ in range(3)]
    moved = [np.exp(vs[0]), vs[1] ** 3 - 2.0, 5.0 * vs[2] + 1.0]
    ics = [0.02, -0.05, 0.03]
    for fn in (combine_equal, combine_ic_weighted, combine_orthogonal):
        a = fn([sig(v) for v in vs], ics).signal.values
        b = fn([sig(v) for v in moved], ics).signal.values
        np.testing.assert_array_equal(a, b)


class TestLasso:
    def test_zero_lambda_is_least_squares(self, rng):
        signals, target = lasso_instance(rng)
        rows = np.arange(60) < 40
        Xs, ys = standardized(signals, target, rows)
        want = np.linalg.solve(Xs.T @ Xs, Xs.T @ ys)
        res = select_lasso(signals, target, [0.0], 40, tol=1e-12)
        np.testing.assert_allclose(res.path[0]["weights"], want, atol=1e-6)
        np.testing.assert_allclose(lasso_cd(Xs, ys, 0.0, tol=1e-12), want, atol=1e-6)

    def test_kkt_along_grid(self, rng):
        signals, target = lasso_instance(rng)
        grid = [0.0, 0.001, 0.01, 0.03, 0.1, 0.3]
        res = select_lasso(signals, target, grid, 40, tol=1e-12)
        Xs, ys = standardized(signals, target, np.arange(60) < 40)
        for entry in res.path:
            lam, b = entry["lambda"], entry["weights"]
            g = lasso_gradient(Xs, ys, b)
            nz = b != 0
            assert np.all(np.abs(g[~nz]) <= lam + 1e-6)
            np.testing.assert_allclose(np.abs(g[nz]), lam, atol=1e-6)
            if lam > 0:
                np.testing.assert_allclose(np.sign(g[nz]), np.sign(b[nz]))

    def test_large_lambda_zero(self, rng):
        signals, target = lasso_instance(rng)
        Xs, ys = standardized(signals, target, np.arange(60) < 40)
        lam = float(np.max(np.abs(Xs.T @ ys / len(ys)))) * 1.01
        res = select_lasso(signals, target, [lam], 40)
        assert np.all(res.path[0]["weights"] == 0) and res.selected == []

    @pytest.mark.parametrize("seed", range(8))
    def test_path_sparsity_monotone(self, seed):
        rng = np.random.default_rng(seed)
        signals, target = lasso_instance(rng, p=6)
        grid = [0.0, 0.005, 0.02, 0.05, 0.1, 0.2, 0.5]
        counts = [e["nonzero"] for e in select_lasso(signals, target, grid, 40).path]
        assert counts == sorted(counts, reverse=True)

    def test_constant_column_dropped(self, rng):
        signals, target = lasso_instance(rng, p=3)
        signals.append(sig(np.ones((60, 20))))
        res = select_lasso(signals, target, [0.0, 0.01], 40, ids=[5, 6, 7, 8])
        assert all(e["weights"][3] == 0 for e in res.path)
        assert 8 not in res.selected and set(res.selected) <= {5, 6, 7}
        assert [r["rank"] for r in res.report] == list(range(1, len(res.report) + 1))

    def test_bad_inputs(self, rng):
        signals, target = lasso_instance(rng, p=2)
        for grid, split in (([], 30), ([-1.0], 30), ([0.1], 0), ([0.1], 60)):
            with pytest.raises(ValueError):
                select_lasso(signals, target, grid, split)


class TestStepwise:
    @pytest.mark.parametrize("seed, p", [(0, 5), (1, 6), (2, 7), (3, 8), (4, 5)])
    def test_matches_exhaustive_oracle(self, seed, p):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=(30, 12))
        values = [y * rng.uniform(-0.5, 0.5) + rng.normal(size=y.shape) for _ in range(p)]
        res = select_stepwise([sig(v) for v in values], sig(y), max_steps=p)
        chosen, irs = oracle_stepwise(values, y, p)
        assert res.selected == [j + 1 for j in chosen]
        np.testing.assert_allclose([r["icir"] for r in res.trajectory], irs, atol=1e-10)

    def test_single(self, rng):
        res = select_stepwise([sig(rng.normal(size=(20, 8)))], sig(rng.normal(size=(20, 8))), 3, ids=[42])
        assert res.selected == [42] and res.trajectory[0]["delta_icir"] == 0.0

    def test_duplicate_never_added(self, rng):
        y = rng.normal(size=(30, 10))
        v = y + rng.normal(size=y.shape)
        res = select_stepwise([sig(v), sig(v.copy())], sig(y), 2)
        assert res.selected == [1]

    def test_delta_bookkeeping(self, rng):
        y = rng.normal(size=(40, 10))
        vs = [sig(0.3 * y + rng.normal(size=y.shape)) for _ in range(6)]
        t = select_stepwise(vs, sig(y), 6).trajectory
        assert sum(r["delta_icir"] for r in t) == pytest.approx(t[-1]["icir"] - t[0]["icir"], abs=1e-12)

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            select_stepwise([], sig(rng.normal(size=(3, 3))), 2)


def test_report_files(tmp_path, rng):
    signals, target = lasso_instance(rng, p=3)
    res = select_lasso(signals, target, [0.0, 0.05], 40)
    write_rows_csv(res.report, LASSO_COLUMNS, tmp_path / "lasso.csv")
    assert (tmp_path / "lasso.csv").read_text().splitlines()[0] == ",".join(LASSO_COLUMNS)
    step = select_stepwise(signals, target, 3)
    write_rows_csv(step.trajectory, STEPWISE_COLUMNS, tmp_path / "step.csv")
    assert len((tmp_path / "step.csv").read_text().splitlines()) == len(step.trajectory) + 1
    export_design_csv(signals, target, tmp_path / "design.csv", ids=[3, 9, 11])
    lines = (tmp_path / "design.csv").read_text().splitlines()
    assert lines[0] == "time,asset,f_003,f_009,f_011,target" and len(lines) == 60 * 20 + 1
