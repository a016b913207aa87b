from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash.setdefault(_RESULTS, [])

    @contextmanager
    def run(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            results.append((number, "FAIL", title, notes + [reason]))
            raise
        results.append((number, "PASS", title, notes))

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, title, notes in sorted(results):
        detail = "; ".join(notes)
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}"
                                    + (f" ({detail})" if detail else ""))
