"""Collects acceptance results and prints one PASS/FAIL line per criterion at the end of the run."""

_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        props = dict(report.user_properties)
        entry = _RESULTS.setdefault(report.nodeid, {"title": report.nodeid.split("::")[-1]})
        entry["title"] = props.get("criterion", entry["title"])
        entry["measured"] = props.get("measured", entry.get("measured", ""))
        if report.outcome != "passed" or "outcome" not in entry:
            entry["outcome"] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for entry in sorted(_RESULTS.values(), key=lambda e: e["title"]):
        line = f"{entry['outcome']}  {entry['title']}"
        if entry.get("measured"):
            line += f"  [{entry['measured']}]"
        terminalreporter.write_line(line)
