"""Shared pytest plumbing: the acceptance checklist summary.

Tests in test_acceptance.py register one line per checklist entry via
record_acceptance; the terminal summary then prints the whole checklist
so a run ends with an explicit PASS/FAIL line for every entry, with the
measured numbers inline.
"""

ACCEPTANCE_RESULTS = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance checklist")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[number]
        verdict = "PASS" if ok else "FAIL"
        line = f"ACCEPTANCE {number:2d} {name}: {verdict}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line, green=ok, red=not ok)
