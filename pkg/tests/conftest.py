import pytest

N_CRITERIA = 9
_results: dict[int, tuple[bool, str, str]] = {}
_used = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome; the summary prints one line per criterion."""
    _used.append(True)

    def record(n: int, ok: bool, detail: str, extra: str = "") -> bool:
        _results[n] = (bool(ok), detail, extra)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _used:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _results:
            ok, detail, _ = _results[n]
            tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n}: NOT RUN OR ERRORED")
    for n in sorted(_results):
        extra = _results[n][2]
        if extra:
            tr.write_sep("-", f"criterion {n} detail")
            for line in extra.rstrip().splitlines():
                tr.write_line(line)
