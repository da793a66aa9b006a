import numpy as np
import pytest

from rettention import AttentionInputs

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    _ACCEPTANCE[name] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0])):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def random_inputs(rng, h, T, d, scale=1.0) -> AttentionInputs:
    return AttentionInputs(*(rng.normal(0.0, scale, size=(h, T, d)) for _ in range(3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
