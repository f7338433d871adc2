import numpy as np
import pytest


def central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` (perturbs ``x`` in place, then restores)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn()
        x[idx] = old - h
        down = fn()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting ------------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(tag, ok, detail)`` prints and records one pass/fail line."""

    def record(tag: str, ok: bool, detail: str) -> bool:
        line = f"[criterion {tag}] {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
