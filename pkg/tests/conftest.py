import numpy as np
import pytest

from epw.mdp import TabularMdp

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def chain_mdp(horizon: int, n_actions: int = 2) -> TabularMdp:
    """One state per level and no failure states."""
    succ = {(h, a): [(h + 1, 1.0)] for h in range(horizon - 1) for a in range(n_actions)}
    feats = np.array([[1.0, h] for h in range(horizon)])
    return TabularMdp([1] * horizon, n_actions, np.zeros(horizon, bool), succ, features=feats, name="chain")


def toy_mdp() -> TabularMdp:
    """Three levels, two actions, scalar features.

    Level 1 has a good state (id 1) and a failure state (id 2); level 2 holds a
    winning state (id 3) and a failure state (id 4).
    """
    succ = {
        (0, 0): [(1, 0.8), (2, 0.2)],
        (0, 1): [(1, 0.3), (2, 0.7)],
        (1, 0): [(3, 0.6), (4, 0.4)],
        (1, 1): [(3, 0.1), (4, 0.9)],
    }
    feats = np.array([[1.0], [-1.0], [0.5], [2.0], [0.0]])
    fail = np.array([False, False, True, False, True])
    return TabularMdp([1, 2, 2], 2, fail, succ, features=feats, name="toy")


@pytest.fixture
def toy():
    return toy_mdp()


@pytest.fixture
def chain():
    return chain_mdp(4)
