"""Prints one PASS/FAIL/SKIP line per acceptance criterion at the end of the session."""

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_ac" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _ACCEPTANCE.setdefault(name, (report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[1][2:])):
        outcome, detail = _ACCEPTANCE[name]
        label = name.split("_", 2)
        terminalreporter.write_line(f"{label[1].upper():5s} {word.get(outcome, outcome.upper()):4s}  "
                                    f"{label[2].replace('_', ' ')}  {detail}")
