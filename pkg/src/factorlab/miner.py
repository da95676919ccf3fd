"""The mining loop: retrieve memory, sample a batch, screen it through the
staged pipeline, update the library and evolve the memory.

Stages per batch
----------------
1. fast IC on the first ``fast_assets`` assets; keep fitness >= tau_ic.
2. full signal on ``full_assets`` assets; correlation against the library.
2.5. admission check on the fast fitness: blocked candidates stop here,
   replacement candidates skip stage 3.
3. greedy intra-batch dedup by descending fitness.
4. final statistics on the full universe and a fresh admission check against
   the library as it stands, replacements first, then admissions, each in
   descending fitness.

Every candidate receives exactly one terminal record in the run log.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dsl import Expr, format_expr, parse, signature
from .errors import FactorLabError, GenerationError
from .generator import ExternalEndpoint, ExternalResult, GenConfig, external_candidates, guided_candidates, random_candidates
from .kernels import evaluate
from .library import AdmissionThresholds, Candidate, DecisionKind, FactorLibrary
from .memory import (
    EMPTY_SIGNAL,
    ExperienceMemory,
    MemoryPolicy,
    MemorySignal,
    Outcome,
    TrajectoryRecord,
    evolve,
    form,
    retrieve,
)
from .metrics import FactorStats, factor_corr, factor_stats, ic_series
from .panel import Panel, SignalMatrix, forward_return
from .errors import DataError

GENERATORS = ("random", "guided", "external")


@dataclass(frozen=True)
class MiningConfig:
    target_size: int = 15
    max_batches: int = 60
    batch_size: int = 40
    thresholds: AdmissionThresholds = field(default_factory=AdmissionThresholds)
    fast_assets: Optional[int] = None
    full_assets: Optional[int] = None
    generator: str = "guided"
    workers: int = 1
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    policy: MemoryPolicy = field(default_factory=MemoryPolicy)
    backend: str = "optimized"
    external: Optional[ExternalEndpoint] = None
    use_memory: bool = True

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_batches < 0:
            raise ValueError("max_batches must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.generator == "external" and self.external is None:
            raise ValueError("the external generator needs an endpoint")
        if self.fast_assets is not None and self.fast_assets < 3:
            raise ValueError("fast_assets must be >= 3")

    def universe(self, n_assets: int) -> tuple[int, int]:
        full = n_assets if self.full_assets is None else self.full_assets
        fast = min(full, 20) if self.fast_assets is None else self.fast_assets
        if not fast <= full <= n_assets:
            raise ValueError(f"need fast_assets ({fast}) <= full_assets ({full}) <= panel assets ({n_assets})")
        return fast, full


@dataclass
class MiningResult:
    library: FactorLibrary
    memory: ExperienceMemory
    log: list[dict]

    def records(self) -> list[dict]:
        return [r for r in self.log if r["type"] == "candidate"]

    def batches(self) -> list[dict]:
        return [r for r in self.log if r["type"] == "batch"]


# ---------------------------------------------------------------- workers

_ctx: dict = {}


def _init(fast_panel, full_panel, fast_target, full_target, backend):
    _ctx.update(fast=(fast_panel, fast_target), full=(full_panel, full_target), backend=backend)


def _screen(job):
    """Evaluate one formula on the fast or full universe. Returns
    (values or None, stats dict, error text)."""
    stage, formula = job
    panel, target = _ctx[stage]
    try:
        sig = evaluate(formula, panel, _ctx["backend"])
    except FactorLabError as exc:
        return None, None, str(exc)
    stats = factor_stats(sig, target).to_dict()
    return (sig.values if stage == "full" else None), stats, ""


class _Pool:
    def __init__(self, workers, *init_args):
        self.workers = workers
        self.init_args = init_args
        self.pool = None
        if workers > 1:
            self.pool = ProcessPoolExecutor(max_workers=workers, initializer=_init, initargs=init_args)
        else:
            _init(*init_args)

    def map(self, jobs):
        if not jobs:
            return []
        if self.pool is None:
            return [_screen(j) for j in jobs]
        return list(self.pool.map(_screen, jobs, chunksize=max(1, len(jobs) // (2 * self.workers))))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
        _ctx.clear()


# ---------------------------------------------------------------- the loop


def _generate(cfg: MiningConfig, batch: int, signal: MemorySignal, seen: set[str]) -> tuple[list[Expr], str]:
    rng = np.random.default_rng([cfg.seed, batch])
    gen = cfg.gen
    if cfg.generator == "random":
        return random_candidates(cfg.batch_size, cfg=gen, rng=rng, exclude=seen), ""
    if cfg.generator == "external":
        res = ExternalResult()
        try:
            exprs = external_candidates(cfg.batch_size, signal, cfg.external, result=res)
            exprs = [e for e in exprs if format_expr(e) not in seen]
            if exprs:
                return exprs, ""
            note = "external generator returned only known formulas"
        except GenerationError as exc:
            note = f"external generator failed ({exc}); fell back to guided"
        return guided_candidates(cfg.batch_size, signal, cfg=gen, rng=rng, exclude=seen), note
    return guided_candidates(cfg.batch_size, signal, cfg=gen, rng=rng, exclude=seen), ""


def _stats(d: Optional[dict]) -> FactorStats:
    if d is None:
        return FactorStats(float("nan"), 0.0, float("nan"), float("nan"), 0.0)
    return FactorStats(**d)


def _safe_corr(a: SignalMatrix, b: SignalMatrix) -> float:
    try:
        return factor_corr(a, b)
    except DataError:
        return 0.0


def ralph_loop(
    panel: Panel,
    cfg: MiningConfig,
    memory: ExperienceMemory | None = None,
    target: SignalMatrix | None = None,
    library: FactorLibrary | None = None,
) -> MiningResult:
    """Mine until the library holds ``target_size`` factors or the batch
    budget runs out."""
    memory = memory if memory is not None else ExperienceMemory()
    th = cfg.thresholds
    fast_n, full_n = cfg.universe(panel.n_assets)
    target = forward_return(panel) if target is None else target
    full_panel = panel.first_assets(full_n)
    fast_panel = panel.first_assets(fast_n)
    full_target = target.first_assets(full_n)
    fast_target = target.first_assets(fast_n)
    lib = library if library is not None else FactorLibrary(th)
    log: list[dict] = []
    seen: set[str] = set(e.formula for e in lib)
    pool = _Pool(cfg.workers, fast_panel, full_panel, fast_target, full_target, cfg.backend)
    try:
        for batch in range(1, cfg.max_batches + 1):
            if len(lib) >= cfg.target_size:
                break
            signal = retrieve(memory, lib) if cfg.use_memory else EMPTY_SIGNAL
            summary = {
                "type": "batch",
                "batch": batch,
                "signal_empty": signal.is_empty,
                "recommended": len(signal.recommended),
                "forbidden": len(signal.forbidden),
            }
            try:
                exprs, note = _generate(cfg, batch, signal, seen)
            except GenerationError as exc:
                summary.update(generated=0, skipped=True, cause=str(exc), library_size=len(lib))
                log.append(summary)
                continue
            records = _run_batch(batch, exprs, lib, pool, th, cfg, full_panel, full_target, summary)
            seen.update(r.formula for r in records)
            lib.verify(recompute=False)
            if note:
                summary["cause"] = note
            summary["library_size"] = len(lib)
            log.extend({"type": "candidate", **r.to_dict()} for r in records)
            log.append(summary)
            if cfg.use_memory:
                memory = evolve(memory, form(records), cfg.policy, library_size=len(lib))
    finally:
        pool.close()
    return MiningResult(lib, memory, log)


def _run_batch(batch, exprs, lib, pool, th, cfg, full_panel, full_target, summary) -> list[TrajectoryRecord]:
    n = len(exprs)
    formulas = [format_expr(e) for e in exprs]
    names = [f"b{batch:03d}_c{i:02d}" for i in range(n)]
    sigs = [signature(e) for e in exprs]
    final: dict[int, TrajectoryRecord] = {}

    def record(i, outcome, stage, stats, max_corr=0.0, blocking=(), entry_id=None):
        final[i] = TrajectoryRecord(
            formula=formulas[i], signature=sigs[i], fitness=float(stats.fitness), icir=float(stats.icir),
            max_corr=float(max_corr), blocking_ids=tuple(blocking), outcome=outcome, batch=batch,
            stage=stage, name=names[i], entry_id=entry_id,
        )

    # Stage 1
    fast = pool.map([("fast", f) for f in formulas])
    fast_stats = [_stats(s) for _, s, _ in fast]
    pass1 = []
    for i, st in enumerate(fast_stats):
        if st.fitness >= th.tau_ic:
            pass1.append(i)
        else:
            record(i, Outcome.REJECTED_IC, "stage1", st)

    # Stage 2 and 2.5
    full = dict(zip(pass1, pool.map([("full", formulas[i]) for i in pass1])))
    signals: dict[int, SignalMatrix] = {}
    full_stats: dict[int, FactorStats] = {}
    corrs: dict[int, dict[int, float]] = {}
    admit, repl = [], []
    for i in pass1:
        values, st, err = full[i]
        if values is None:
            record(i, Outcome.REJECTED_IC, "stage2", fast_stats[i])
            continue
        signals[i] = full_target.with_values(values)
        full_stats[i] = _stats(st)
        corrs[i] = lib.correlations(signals[i])
        cand = Candidate(names[i], exprs[i], fast_stats[i], signals[i], corrs[i])
        d = lib.check_admission(cand, th)
        if d.kind is DecisionKind.REJECT_CORR:
            record(i, Outcome.REJECTED_CORR, "stage2", fast_stats[i], d.max_corr, d.blocking)
        elif d.kind is DecisionKind.REPLACE:
            repl.append(i)
        else:
            admit.append(i)

    # Stage 3
    kept: list[int] = []
    for i in sorted(admit, key=lambda j: (-fast_stats[j].fitness, j)):
        worst = 0.0
        for k in kept:
            worst = max(worst, abs(_safe_corr(signals[i], signals[k])))
            if worst >= th.theta:
                break
        if worst >= th.theta:
            record(i, Outcome.REJECTED_DUP, "stage3", fast_stats[i], worst)
        else:
            kept.append(i)

    # Stage 4
    applied_admit = applied_repl = capped = 0
    order = sorted(repl, key=lambda j: (-full_stats[j].fitness, j)) + sorted(kept, key=lambda j: (-full_stats[j].fitness, j))
    for i in order:
        st = full_stats[i]
        cand = Candidate(names[i], exprs[i], st, signals[i], corrs[i])
        d = lib.check_admission(cand, th)
        if d.kind is DecisionKind.REJECT_IC:
            record(i, Outcome.REJECTED_IC, "stage4", st, d.max_corr)
        elif d.kind is DecisionKind.REJECT_CORR:
            record(i, Outcome.REJECTED_CORR, "stage4", st, d.max_corr, d.blocking)
        elif d.kind is DecisionKind.ADMIT and len(lib) >= cfg.target_size:
            capped += 1
            record(i, Outcome.REJECTED_DUP, "capacity", st, d.max_corr)
        else:
            new_id = lib.apply(d, cand)
            if d.kind is DecisionKind.REPLACE:
                applied_repl += 1
                record(i, Outcome.REPLACED_IN, "stage4", st, d.max_corr, d.blocking, entry_id=new_id)
            else:
                applied_admit += 1
                record(i, Outcome.ADMITTED, "stage4", st, d.max_corr, entry_id=new_id)

    summary.update(
        generated=n,
        stage1_pass=len(pass1),
        stage2_blocked=sum(1 for r in final.values() if r.stage == "stage2" and r.outcome is Outcome.REJECTED_CORR),
        replacement_candidates=len(repl),
        stage3_dups=sum(1 for r in final.values() if r.stage == "stage3"),
        stage4_pass=applied_admit + applied_repl,
        admitted=applied_admit,
        replaced=applied_repl,
        capacity_skipped=capped,
    )
    assert len(final) == n, "every candidate needs a terminal record"
    return [final[i] for i in range(n)]


# ------------------------------------------------------------------ output


def _json_safe(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_run_log(log: Sequence[dict], path: Union[str, Path]) -> None:
    """JSON lines with sorted keys; undefined numbers are written as null."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in log:
            fh.write(json.dumps(_json_safe(row), sort_keys=True, allow_nan=False) + "\n")


def read_run_log(path: Union[str, Path]) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = (
    "mode", "high_quality", "yield_pct", "rejected_redundant", "rejection_pct", "admitted", "tau_ic", "theta",
)
MODES = ("with_memory", "no_memory")


def ablation_summary(mode: str, result: MiningResult) -> dict:
    th = result.library.thresholds
    recs = result.records()
    generated = len(recs)
    high = sum(1 for r in recs if r["stage"] != "stage1")
    redundant = sum(1 for r in recs if r["outcome"] in (Outcome.REJECTED_CORR.value, Outcome.REJECTED_DUP.value)
                    and r["stage"] != "capacity")
    admitted = sum(1 for r in recs if r["outcome"] in (Outcome.ADMITTED.value, Outcome.REPLACED_IN.value))
    return {
        "mode": mode,
        "generated": generated,
        "high_quality": high,
        "yield_pct": 100.0 * high / generated if generated else 0.0,
        "rejected_redundant": redundant,
        "rejection_pct": 100.0 * redundant / high if high else 0.0,
        "admitted": admitted,
        "tau_ic": th.tau_ic,
        "theta": th.theta,
    }


def ablation_run(
    panel: Panel,
    cfg: MiningConfig,
    mode: str,
    memory: ExperienceMemory | None = None,
    target: SignalMatrix | None = None,
) -> tuple[dict, MiningResult]:
    """One arm of the memory ablation.

    ``with_memory`` mines with the guided sampler and live memory;
    ``no_memory`` feeds the sampler an empty signal and never updates memory.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    use = mode == "with_memory"
    arm = replace(cfg, use_memory=use, generator="guided" if cfg.generator == "random" and use else cfg.generator)
    mem = memory if (use and memory is not None) else ExperienceMemory()
    result = ralph_loop(panel, arm, mem, target)
    return ablation_summary(mode, result), result


def ablation_compare(panel, cfg, memory=None, target=None) -> list[dict]:
    return [ablation_run(panel, cfg, m, memory, target)[0] for m in MODES]


def write_ablation_csv(rows: Sequence[dict], path: Union[str, Path]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in ABLATION_COLUMNS])
