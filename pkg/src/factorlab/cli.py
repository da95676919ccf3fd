"""Command-line entry point. Each subcommand loads inputs, calls one library
function and writes CSV/TSV/JSON outputs; no computation lives here."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import library as libmod
from . import memory as memmod
from .errors import ConfigError, FactorLabError
from .panel import Panel, SignalMatrix, SynthConfig, forward_return, load_csv, save_csv, synth_panel


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one machine-parsable line instead of usage text
        raise UsageError(message)


def _rows(sig: SignalMatrix, sl: slice) -> SignalMatrix:
    return SignalMatrix(sig.values[sl], sig.timestamps[sl], sig.assets)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _planted(items: Sequence[str]) -> dict:
    out = {}
    for it in items or ():
        name, _, val = it.partition("=")
        try:
            out[name] = float(val)
        except ValueError:
            raise UsageError(f"--plant expects name=strength, got {it!r}") from None
    return out


# ------------------------------------------------------------------ commands


def cmd_synth(a) -> None:
    cfg = SynthConfig(n_assets=a.assets, n_bars=a.bars, seed=a.seed, planted=_planted(a.plant))
    out = Path(a.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(synth_panel(cfg), out)


def cmd_eval(a) -> None:
    from .kernels import evaluate
    from .metrics import ic_series, quantile_analysis, tearsheet, write_tearsheet_csv

    panel = load_csv(a.panel)
    sig = evaluate(a.formula, panel, a.backend)
    target = forward_return(panel)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    write_tearsheet_csv([(a.name, tearsheet(sig, target, a.quantiles))], out / "tearsheet.csv")
    series = ic_series(sig, target)
    _write_csv(out / "ic_series.csv", ["timestamp", "ic"], zip(series.timestamps.tolist(), series.values))
    rep = quantile_analysis(sig, target, a.quantiles)
    _write_csv(out / "quantile_returns.csv", ["quantile", "mean_return"],
               [(q + 1, v) for q, v in enumerate(rep.quantile_returns)])
    _write_csv(out / "long_short.csv", ["timestamp", "ls_return", "ls_cumulative"],
               zip(rep.timestamps.tolist(), rep.long_short, rep.ls_cumulative))


def _load_memory(spec: Optional[str]):
    if spec is None or spec == "none":
        return memmod.ExperienceMemory()
    if spec == "seed":
        return memmod.load_seed()
    return memmod.load(spec)


def _mining_inputs(a):
    from .config import load_run_config
    from .kernels import default_workers

    rc = load_run_config(a.config)
    if a.out_dir:
        rc = type(rc)(**{**rc.__dict__, "paths": type(rc.paths)(**{**rc.paths.__dict__, "out_dir": a.out_dir})})
    workers = a.workers if a.workers is not None else rc.mining.get("workers", default_workers())
    mcfg = rc.mining_config(workers=workers, seed=a.seed, max_batches=a.max_batches)
    panel = load_csv(rc.paths.panel) if rc.paths.panel else synth_panel(rc.synth)
    Path(rc.paths.out_dir).mkdir(parents=True, exist_ok=True)
    return rc, mcfg, panel


def cmd_mine(a) -> None:
    from .miner import ralph_loop, write_run_log

    rc, mcfg, panel = _mining_inputs(a)
    res = ralph_loop(panel, mcfg, _load_memory(rc.paths.memory))
    libmod.save(res.library, rc.out_path(rc.paths.library))
    memmod.save(res.memory, rc.out_path(rc.paths.memory_out))
    write_run_log(res.log, rc.out_path(rc.paths.run_log))


def cmd_ablate(a) -> None:
    from .miner import ablation_compare, write_ablation_csv

    rc, mcfg, panel = _mining_inputs(a)
    rows = ablation_compare(panel, mcfg, _load_memory(rc.paths.memory))
    write_ablation_csv(rows, rc.out_path(a.output))


def _library_signals(a):
    from .kernels import evaluate

    panel = load_csv(a.panel)
    lib = libmod.load(a.library, panel)
    if len(lib) == 0:
        raise FactorLabError(f"library {a.library} is empty")
    target = forward_return(panel)
    return panel, lib, [e.signal for e in lib], target


def _split(panel: Panel, split: Optional[int]) -> int:
    s = panel.n_bars // 2 if split is None else split
    if not 0 < s < panel.n_bars:
        raise UsageError(f"--split must lie in 1..{panel.n_bars - 1}")
    return s


def cmd_combine(a) -> None:
    from .metrics import tearsheet, write_tearsheet_csv
    from .portfolio import combine_equal, combine_ic_weighted, combine_orthogonal
    from .metrics import ic_series

    panel, lib, sigs, target = _library_signals(a)
    s = _split(panel, a.split)
    train = slice(0, s)
    test = slice(s, None)
    ics = [ic_series(_rows(x, train), _rows(target, train)).mean() for x in sigs]
    ics = [c if np.isfinite(c) else 0.0 for c in ics]
    rows = []
    for name, fn in (("equal", combine_equal), ("ic_weighted", combine_ic_weighted), ("orthogonal", combine_orthogonal)):
        comb = fn(sigs, ics).signal
        rows.append((name, tearsheet(_rows(comb, test), _rows(target, test), a.quantiles)))
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    write_tearsheet_csv(rows, out / "combination.csv")


def cmd_select(a) -> None:
    from .portfolio import LASSO_COLUMNS, STEPWISE_COLUMNS, export_design_csv, select_lasso, select_stepwise, write_rows_csv

    panel, lib, sigs, target = _library_signals(a)
    s = _split(panel, a.split)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    res = select_lasso(sigs, target, a.lambdas, s, ids=lib.ids)
    write_rows_csv(res.report, LASSO_COLUMNS, out / "lasso.csv")
    _write_csv(out / "lasso_path.csv", ["lambda", "nonzero", "valid_ic"],
               [(p["lambda"], p["nonzero"], p["valid_ic"]) for p in res.path])
    train_target = _rows(target, slice(0, s))
    step = select_stepwise([_rows(x, slice(0, s)) for x in sigs], train_target, a.max_steps, ids=lib.ids)
    write_rows_csv(step.trajectory, STEPWISE_COLUMNS, out / "stepwise.csv")
    if a.export_design:
        export_design_csv(sigs, target, out / "design.csv", ids=lib.ids)


def cmd_stress(a) -> None:
    from .kernels import evaluate
    from .metrics import cost_stress

    panel = load_csv(a.panel)
    sig = evaluate(a.formula, panel, a.backend)
    rep = cost_stress(sig, forward_return(panel), a.quantiles, [0.0] + [c for c in a.costs if c != 0.0])
    cols = list(rep.cumulative)
    header = ["timestamp", "turnover"] + [f"cum_{c:g}bps" for c in cols]
    rows = [[int(t), rep.turnover[i]] + [rep.cumulative[c][i] for c in cols] for i, t in enumerate(rep.timestamps)]
    _write_csv(Path(a.output), header, rows)


def cmd_bench(a) -> None:
    from .kernels import bench_kernels, write_bench_csv

    if a.panel:
        panel = load_csv(a.panel)
    else:
        panel = synth_panel(SynthConfig(n_assets=a.assets, n_bars=a.bars, seed=a.seed))
    rows = bench_kernels(panel, a.formula or (), repeats=a.repeats, window=a.window)
    out = Path(a.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out)


# -------------------------------------------------------------------- parser


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="factorlab", description="Formulaic alpha mining toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic panel CSV")
    s.add_argument("--assets", type=int, default=50)
    s.add_argument("--bars", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plant", action="append", metavar="NAME=STRENGTH", help="plant a predictive feature")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="tear-sheet CSVs for one formula")
    e.add_argument("--panel", required=True)
    e.add_argument("--formula", required=True)
    e.add_argument("--name", default="factor")
    e.add_argument("--quantiles", type=int, default=5)
    e.add_argument("--backend", choices=("naive", "optimized"), default="optimized")
    e.add_argument("-o", "--output", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    for name, fn, helptext in (("mine", cmd_mine, "run the mining loop"), ("ablate", cmd_ablate, "memory ablation")):
        m = sub.add_parser(name, help=helptext)
        m.add_argument("--config", required=True)
        m.add_argument("--workers", type=int)
        m.add_argument("--seed", type=int)
        m.add_argument("--max-batches", type=int)
        m.add_argument("--out-dir")
        if name == "ablate":
            m.add_argument("-o", "--output", default="ablation.csv", help="file name inside the output directory")
        m.set_defaults(func=fn)

    for name, fn, helptext in (("combine", cmd_combine, "combine library factors"), ("select", cmd_select, "select library factors")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--panel", required=True)
        c.add_argument("--library", required=True)
        c.add_argument("--split", type=int, help="first test bar (default: half way)")
        c.add_argument("--quantiles", type=int, default=5)
        c.add_argument("-o", "--output", required=True, help="output directory")
        if name == "select":
            c.add_argument("--lambdas", type=_csv_floats, default=[0.0, 0.001, 0.003, 0.01, 0.03, 0.1])
            c.add_argument("--max-steps", type=int, default=10)
            c.add_argument("--export-design", action="store_true")
        c.set_defaults(func=fn)

    st = sub.add_parser("stress", help="transaction-cost stress series")
    st.add_argument("--panel", required=True)
    st.add_argument("--formula", required=True)
    st.add_argument("--costs", type=_csv_floats, default=[1.0, 4.0, 7.0, 10.0, 11.0])
    st.add_argument("--quantiles", type=int, default=5)
    st.add_argument("--backend", choices=("naive", "optimized"), default="optimized")
    st.add_argument("-o", "--output", required=True)
    st.set_defaults(func=cmd_stress)

    b = sub.add_parser("bench", help="time naive and optimized kernels")
    b.add_argument("--panel")
    b.add_argument("--assets", type=int, default=500)
    b.add_argument("--bars", type=int, default=12610)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--formula", action="append")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--window", type=int, default=20)
    b.add_argument("-o", "--output", default="bench.csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 3
    except FactorLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
