# criterion id -> (description, measured, threshold, passed)
ACCEPTANCE: dict[int, tuple[str, str, str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        name, value, tol, ok = ACCEPTANCE[cid]
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  [{cid:2d}] {name}: {value} (required {tol})")
