import numpy as np
import pytest

from factorlab.panel import SynthConfig, synth_panel


@pytest.fixture(scope="session")
def small_panel():
    return synth_panel(SynthConfig(n_assets=12, n_bars=300, seed=5))


@pytest.fixture(scope="session")
def planted_panel():
    return synth_panel(
        SynthConfig(n_assets=30, n_bars=600, seed=11, planted={"range_position": 0.3, "vwap_reversal": 0.2})
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        prev = item.config._criteria.get(number)
        ok = not failed and (prev is None or prev[1])
        item.config._criteria[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
