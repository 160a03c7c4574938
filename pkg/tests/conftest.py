import re
import sys
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_outcomes: dict[int, list[tuple[str, bool]]] = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[int(m.group(1))].append((report.nodeid.split("::")[-1], report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        failed = [name for name, ok in results if not ok]
        verdict = "FAIL" if failed else "PASS"
        detail = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n}: {verdict}, {len(results)} test(s){detail}")
