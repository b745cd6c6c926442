import pytest

_RESULTS = pytest.StashKey[dict]()
NUM_CRITERIA = 9


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def acceptance(request):
    """``record(number, title, ok, detail)`` for the end-of-run acceptance summary."""
    results = request.config.stash[_RESULTS]

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        results[number] = (title, bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        if n not in results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN (deselected or errored before its check)")
            continue
        title, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  {detail}")
