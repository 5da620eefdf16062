import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if key not in _outcomes or status == "FAIL":
            _outcomes[key] = (m.group(2).replace("_", " "), status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes):
        name, status, detail = _outcomes[key]
        line = f"criterion {key}: {status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
