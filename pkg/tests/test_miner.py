import numpy as np
import pytest

from factorlab.dsl import parse
from factorlab.library import AdmissionThresholds, Candidate, FactorLibrary
from factorlab.memory import ExperienceMemory, Outcome, dumps, load_seed
from factorlab.metrics import factor_corr
from factorlab.miner import (
    ABLATION_COLUMNS,
    MiningConfig,
    _run_batch,
    ablation_compare,
    ablation_run,
    ralph_loop,
    read_run_log,
    write_run_log,
)
from factorlab.generator import GenConfig
from factorlab.panel import forward_return

from helpers import sig, stats_with_fitness

TERMINAL = {o.value for o in Outcome}


def quick_cfg(**kw):
    base = dict(target_size=10, max_batches=4, batch_size=20, generator="random", seed=3)
    base.update(kw)
    return MiningConfig(**base)


@pytest.fixture(scope="module")
def mined(planted_panel):
    return ralph_loop(planted_panel, quick_cfg(), ExperienceMemory())


def test_library_within_size_and_invariant(mined):
    lib = mined.library
    assert len(lib) <= 10
    lib.verify()
    for e in lib:
        assert e.fitness >= lib.thresholds.tau_ic


def test_every_candidate_once(mined):
    recs = mined.records()
    assert all(r["outcome"] in TERMINAL for r in recs)
    for b in mined.batches():
        mine = [r for r in recs if r["batch"] == b["batch"]]
        assert len(mine) == b["generated"]
        assert len({r["name"] for r in mine}) == len(mine)
    assert len({r["formula"] for r in recs}) == len(recs)


def test_stage_accounting(mined):
    recs = mined.records()
    for b in mined.batches():
        mine = [r for r in recs if r["batch"] == b["batch"]]
        stage1_fail = sum(r["stage"] == "stage1" for r in mine)
        assert b["stage1_pass"] == b["generated"] - stage1_fail
        assert b["admitted"] == sum(r["outcome"] == "admitted" for r in mine)
        assert b["replaced"] == sum(r["outcome"] == "replaced_in" for r in mine)
        # later stages only see earlier survivors
        assert b["stage2_blocked"] + b["stage3_dups"] + b["stage4_pass"] <= b["stage1_pass"]


def test_admitted_meet_full_threshold(mined):
    tau = mined.library.thresholds.tau_ic
    for r in mined.records():
        if r["outcome"] in ("admitted", "replaced_in"):
            assert r["fitness"] >= tau and r["stage"] == "stage4"
            assert r["entry_id"] is not None


def test_admitted_ids_match_library(mined):
    live = set(mined.library.ids)
    admitted = {r["entry_id"] for r in mined.records() if r["entry_id"] is not None}
    assert live <= admitted


def test_run_log_round_trip(mined, tmp_path):
    p = tmp_path / "log.jsonl"
    write_run_log(mined.log, p)
    back = read_run_log(p)
    assert len(back) == len(mined.log)
    for got, want in zip(back, mined.log):
        assert set(got) == set(want)
        for k, v in want.items():
            if isinstance(v, float) and np.isnan(v):
                assert got[k] is None
            else:
                assert got[k] == (list(v) if isinstance(v, tuple) else v)


def test_memory_evolves(mined):
    assert mined.memory.state.batches_run == len(mined.batches())
    assert mined.memory.state.library_size == len(mined.library)


def test_stops_at_target(planted_panel):
    res = ralph_loop(planted_panel, quick_cfg(target_size=2, max_batches=10))
    assert len(res.library) <= 2
    if len(res.library) == 2:
        assert len(res.batches()) < 10 or res.batches()[-1]["library_size"] == 2


def test_workers_identical(planted_panel, tmp_path):
    cfg = quick_cfg(max_batches=2, generator="guided")
    a = ralph_loop(planted_panel, cfg, load_seed())
    b = ralph_loop(planted_panel, MiningConfig(**{**cfg.__dict__, "workers": 2}), load_seed())
    write_run_log(a.log, tmp_path / "a.jsonl")
    write_run_log(b.log, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert dumps(a.memory) == dumps(b.memory)
    assert [e.formula for e in a.library] == [e.formula for e in b.library]


def test_generator_failure_skips_batch(planted_panel):
    cfg = quick_cfg(max_batches=2, gen=GenConfig(max_depth=1, fields=("close",), max_retries=2))
    res = ralph_loop(planted_panel, cfg)
    assert [b.get("skipped") for b in res.batches()] == [True, True]
    assert all("cause" in b for b in res.batches())


def test_external_falls_back(planted_panel, tmp_path):
    from factorlab.generator import ExternalEndpoint

    cfg = quick_cfg(max_batches=1, generator="external", external=ExternalEndpoint(("/nonexistent/gen",)))
    res = ralph_loop(planted_panel, cfg)
    (b,) = res.batches()
    assert "fell back" in b["cause"] and b["generated"] == 20


def test_config_validation():
    with pytest.raises(ValueError):
        MiningConfig(generator="external")
    with pytest.raises(ValueError):
        MiningConfig(fast_assets=2)
    with pytest.raises(ValueError):
        MiningConfig(fast_assets=30, full_assets=10).universe(50)
    assert MiningConfig().universe(50) == (20, 50)


class _FakePool:
    """Hands back prepared statistics and signals instead of evaluating."""

    def __init__(self, fast_fit, full_values):
        self.fast_fit = fast_fit
        self.full_values = full_values

    def map(self, jobs):
        out = []
        for stage, formula in jobs:
            st = stats_with_fitness(self.fast_fit[formula]).__dict__
            out.append((self.full_values.get(formula) if stage == "full" else None, dict(st), ""))
        return out


def test_batch_accounting_example(rng):
    """Seven Stage-1 survivors, five blocked by correlation, two admitted."""
    shape = (40, 30)
    th = AdmissionThresholds()
    lib = FactorLibrary(th)
    incumbents = [rng.normal(size=shape) for _ in range(5)]
    for k, v in enumerate(incumbents):
        c = Candidate(f"inc{k}", parse(f"Mean($close, {k + 2})"), stats_with_fitness(0.09), sig(v))
        lib.apply(lib.check_admission(c), c)
    survivors = [0.071, 0.068, 0.062, 0.062, 0.057, 0.089, 0.101]
    blocked_fit = [0.071, 0.068, 0.062, 0.057, 0.101]
    formulas = [f"Std($volume, {w})" for w in range(2, 12)]
    fast_fit, full_values = {}, {}
    blocked_iter = iter(range(5))
    for i, f in enumerate(formulas):
        if i < len(survivors):
            fit = survivors[i]
            fast_fit[f] = fit
            if fit in blocked_fit and i != 3:
                full_values[f] = incumbents[next(blocked_iter)] + 0.1 * rng.normal(size=shape)
            else:
                full_values[f] = rng.normal(size=shape)
        else:
            fast_fit[f] = 0.01
    # fitness 0.062 appears twice: the first copy is blocked, the second admitted
    summary = {}
    target = sig(np.zeros(shape))
    recs = _run_batch(
        7, [parse(f) for f in formulas], lib, _FakePool(fast_fit, full_values), th,
        MiningConfig(target_size=50), None, target, summary,
    )
    assert summary["stage1_pass"] == 7
    assert summary["stage2_blocked"] == 5
    assert summary["admitted"] == 2 and summary["replaced"] == 0
    assert len(lib) == 7
    blocked = [r for r in recs if r.outcome is Outcome.REJECTED_CORR]
    assert sorted(r.fitness for r in blocked) == sorted(blocked_fit)
    assert all(len(r.blocking_ids) == 1 for r in blocked)


class TestAblation:
    def test_no_memory_signal_empty(self, planted_panel):
        cfg = quick_cfg(max_batches=2, generator="guided", thresholds=AdmissionThresholds(tau_ic=0.02, theta=0.85))
        row, res = ablation_run(planted_panel, cfg, "no_memory", load_seed())
        assert all(b["signal_empty"] for b in res.batches())
        assert res.memory.state.batches_run == 0
        assert (row["tau_ic"], row["theta"]) == (0.02, 0.85)

    def test_with_memory_uses_signal(self, planted_panel):
        row, res = ablation_run(planted_panel, quick_cfg(max_batches=1, generator="guided"), "with_memory", load_seed())
        assert not res.batches()[0]["signal_empty"]

    def test_report_columns(self, planted_panel, tmp_path):
        from factorlab.miner import write_ablation_csv

        rows = ablation_compare(planted_panel, quick_cfg(max_batches=1), load_seed())
        assert [r["mode"] for r in rows] == ["with_memory", "no_memory"]
        for r in rows:
            assert set(ABLATION_COLUMNS) <= set(r)
            assert 0 <= r["yield_pct"] <= 100 and r["high_quality"] <= r["generated"]
        path = tmp_path / "abl.csv"
        write_ablation_csv(rows, path)
        assert path.read_text().splitlines()[0] == ",".join(ABLATION_COLUMNS)

    def test_bad_mode(self, planted_panel):
        with pytest.raises(ValueError):
            ablation_run(planted_panel, quick_cfg(), "sometimes")
