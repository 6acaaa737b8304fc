"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

_AC = re.compile(r'test_acceptance\.py::test_ac(\d+)_(\w+)')
_results = {}
_setup = {}


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when == 'setup':
        # Study fixtures run during setup; count that time toward the criterion.
        _setup[key] = report.duration
        if report.outcome != 'passed':
            _results[key] = (m.group(2), report.outcome, report.duration)
    elif report.when == 'call':
        _results[key] = (m.group(2), report.outcome, report.duration + _setup.get(key, 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section('acceptance criteria')
    for key in sorted(_results):
        name, outcome, duration = _results[key]
        status = 'PASS' if outcome == 'passed' else 'FAIL'
        terminalreporter.write_line(f'AC{key:<3d} {status}  {name}  ({duration:.1f} s)')
