import csv
import json
import subprocess
import sys

import pytest

from factorlab.cli import main
from factorlab.config import load_run_config, parse_run_config
from factorlab.errors import ConfigError
from factorlab.memory import load as load_memory
from factorlab.miner import ABLATION_COLUMNS, read_run_log
from factorlab.kernels.bench import BENCH_COLUMNS
from factorlab.metrics import TEARSHEET_COLUMNS

from fixtures import SHORT_REVERSAL, VOL_REGIME_REVERSAL


class TestConfig:
    def test_sections(self):
        rc = parse_run_config(
            {
                "synth": {"n_assets": 20, "n_bars": 300, "seed": 1},
                "mining": {"target_size": 5, "generator": "random"},
                "thresholds": {"tau_ic": 0.02, "theta": 0.85},
                "paths": {"out_dir": "x"},
            }
        )
        m = rc.mining_config()
        assert m.target_size == 5 and m.thresholds.theta == 0.85
        assert rc.synth.n_assets == 20 and str(rc.out_path("a")) == "x/a"

    @pytest.mark.parametrize(
        "doc, where",
        [
            ({"nope": 1}, "$.nope"),
            ({"mining": {"nope": 1}}, "$.mining.nope"),
            ({"thresholds": {"theta": 2.0}}, "$.thresholds"),
            ({"mining": {"generator": "llm"}}, "mining"),
            ({"synth": []}, "$.synth"),
        ],
    )
    def test_errors_name_path(self, doc, where):
        with pytest.raises(ConfigError) as info:
            parse_run_config(doc)
        assert where in str(info.value)

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_run_config(bad)


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "panel.csv"
    assert main(["synth", "--assets", "12", "--bars", "240", "--seed", "2", "--plant", "momentum=0.3", "-o", str(path)]) == 0
    return path


def run_config(tmp_path, **mining):
    cfg = {
        "synth": {"n_assets": 15, "n_bars": 300, "seed": 4, "planted": {"range_position": 0.3}},
        "mining": {"target_size": 4, "max_batches": 2, "batch_size": 12, "generator": "random", "seed": 1, **mining},
        "thresholds": {"tau_ic": 0.02, "theta": 0.85},
        "paths": {"out_dir": str(tmp_path / "out"), "memory": "seed"},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_eval_writes_tearsheet(panel_csv, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--panel", str(panel_csv), "--formula", VOL_REGIME_REVERSAL, "-o", str(out)]) == 0
    with open(out / "tearsheet.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TEARSHEET_COLUMNS and len(rows) == 2
    for name in ("ic_series.csv", "quantile_returns.csv", "long_short.csv"):
        assert (out / name).exists()


def test_mine_is_reproducible(tmp_path):
    cfg = run_config(tmp_path)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["mine", "--config", str(cfg), "--out-dir", str(out), "--workers", "1"]) == 0
        outs.append(out)
    for name in ("library.tsv", "memory.json", "run_log.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    log = read_run_log(outs[0] / "run_log.jsonl")
    assert any(r["type"] == "batch" for r in log)
    load_memory(outs[0] / "memory.json").check()


def test_ablate(tmp_path):
    cfg = run_config(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--max-batches", "1"]) == 0
    with open(tmp_path / "out" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [r["mode"] for r in rows] == ["with_memory", "no_memory"]
    assert {(r["tau_ic"], r["theta"]) for r in rows} == {("0.02", "0.85")}


def test_combine_select_stress(panel_csv, tmp_path):
    lib = tmp_path / "lib.tsv"
    lib.write_text(
        "# next_id\t4\n"
        f"001\trev\t{SHORT_REVERSAL}\n"
        "002\tvolz\tCsRank(Div($volume, Mean($volume, 24)))\n"
        "003\tmom\tCsRank(Delta($close, 12))\n"
    )
    out = tmp_path / "port"
    assert main(["combine", "--panel", str(panel_csv), "--library", str(lib), "-o", str(out)]) == 0
    with open(out / "combination.csv") as fh:
        assert [r["name"] for r in csv.DictReader(fh)] == ["equal", "ic_weighted", "orthogonal"]
    assert main(["select", "--panel", str(panel_csv), "--library", str(lib), "--export-design", "-o", str(out)]) == 0
    for name in ("lasso.csv", "lasso_path.csv", "stepwise.csv", "design.csv"):
        assert (out / name).exists()
    stress = tmp_path / "stress.csv"
    assert main(["stress", "--panel", str(panel_csv), "--formula", SHORT_REVERSAL, "-o", str(stress)]) == 0
    header = stress.read_text().splitlines()[0].split(",")
    assert header == ["timestamp", "turnover", "cum_0bps", "cum_1bps", "cum_4bps", "cum_7bps", "cum_10bps", "cum_11bps"]


def test_bench(panel_csv, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--panel", str(panel_csv), "--repeats", "3", "--formula", SHORT_REVERSAL, "-o", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == ",".join(BENCH_COLUMNS) and any(",factor," in r for r in rows)


@pytest.mark.parametrize(
    "argv, code, needle",
    [
        (["frobnicate"], 2, "usage"),
        (["synth", "-o", "x.csv", "--plant", "momentum"], 2, "name=strength"),
        (["eval", "--panel", "/nonexistent.csv", "--formula", "$close", "-o", "x"], 1, "error"),
    ],
)
def test_error_exit_codes(argv, code, needle, capsys):
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:") and needle in err[0]


def test_bad_formula_exit(panel_csv, tmp_path, capsys):
    assert main(["eval", "--panel", str(panel_csv), "--formula", "Add($close)", "-o", str(tmp_path)]) == 1
    assert "ParseError" in capsys.readouterr().err


def test_config_error_exit(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mining": {"nope": 1}}))
    assert main(["mine", "--config", str(p)]) == 3
    assert "$.mining.nope" in capsys.readouterr().err


def test_console_script_installed():
    res = subprocess.run([sys.executable, "-m", "factorlab.cli", "synth", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--plant" in res.stdout
