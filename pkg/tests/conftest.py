import os

os.environ.setdefault("BFLAB_THREADS", str(os.cpu_count() or 1))

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(num, title, passed, detail):
    ACCEPTANCE[num] = (title, bool(passed), detail)
    print(f"\n[acceptance {num:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{num:2d}. {'PASS' if ok else 'FAIL'}  {title}: {detail}")
