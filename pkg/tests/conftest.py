import numpy as np
import pytest


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.logspace(0.0, -np.log10(cond), n)
    A = (Q * d) @ Q.T
    return 0.5 * (A + A.T)


def spread_pair(rng, n, lo=1e-2, hi=1e2, m_cond=10.0):
    """``(A, M, mu)`` with ``A W = M W diag(mu)``, ``W^T M W = I`` and log-spaced ``mu``.

    Well separated generalized eigenvalues make CG run the full dimension.
    """
    M = random_spd(rng, n, m_cond)
    L = np.linalg.cholesky(M)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    W = np.linalg.solve(L.T, Q)
    mu = np.logspace(np.log10(hi), np.log10(lo), n)
    MW = M @ W
    A = (MW * mu) @ MW.T
    return 0.5 * (A + A.T), M, mu


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def rel(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(label, ok, detail)`` records one pass/fail line and returns ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
