"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

from __future__ import annotations

_outcomes: dict[int, list[tuple[str, str]]] = {}
_numbers: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker:
            _numbers[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    number = _numbers.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _outcomes.setdefault(number, []).append((report.nodeid.split("::")[-1], outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        verdicts = {o for _, o in results}
        if "FAIL" in verdicts:
            verdict = "FAIL"
        elif verdicts == {"SKIP"}:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        names = ", ".join(f"{n}={o}" for n, o in results)
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  ({names})")
