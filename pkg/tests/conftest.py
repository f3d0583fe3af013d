import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

N_CRITERIA = 10
_results = {}   # criterion -> [(test name, status, detail)]
_details = {}   # test node id -> [detail text]


def data_dir() -> Path:
    return Path(os.environ.get("MNN_DATA_DIR", Path.home() / "data"))


def data_path(env: str, default: str) -> Path:
    return Path(os.environ[env]) if os.environ.get(env) else data_dir() / default


@pytest.fixture
def detail(request):
    """Attach a short measurement summary to the acceptance line of this test."""
    def put(text: str):
        _details.setdefault(request.node.nodeid, []).append(text)
    return put


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if rep.skipped:
            status, text = "BLOCKED", rep.longrepr[2] if isinstance(rep.longrepr, tuple) else ""
        else:
            status = "PASS" if rep.passed else "FAIL"
            text = "; ".join(_details.get(item.nodeid, []))
            if rep.failed and not text:
                text = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _results.setdefault(marker.args[0], []).append((item.name, status, text))


def _overall(parts):
    statuses = {s for _, s, _ in parts}
    return "FAIL" if "FAIL" in statuses else "BLOCKED" if "BLOCKED" in statuses else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        parts = _results.get(n)
        if not parts:
            tr.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        body = " | ".join(f"{name}: {status}" + (f" ({text})" if text else "")
                          for name, status, text in parts)
        tr.write_line(f"criterion {n:2d}: {_overall(parts)} -- {body}")
