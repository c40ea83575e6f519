import contextlib
import time

import numpy as np
import pytest

from hoidesk.tensor import set_default_dtype

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _f64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Record:
    detail = ""


@pytest.fixture
def acceptance():
    """``with acceptance(n, title) as rec:`` records PASS/FAIL for criterion ``n``."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        rec = _Record()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            _ACCEPTANCE[number] = f"FAIL  {number:>2}. {title} ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})"
            raise
        took = time.perf_counter() - start
        _ACCEPTANCE[number] = f"PASS  {number:>2}. {title}: {rec.detail} [{took:.1f}s]"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
