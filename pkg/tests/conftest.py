import numpy as np
import pytest

from wbgnn.autodiff import Tape, Tensor


def central_fd(fn, arrays, eps=1e-6):
    """Central finite differences of a scalar numpy-valued ``fn(list[Tensor])``."""
    base = [np.array(a, dtype=float) for a in arrays]
    grads = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            hi = [b.copy() for b in base]
            lo = [b.copy() for b in base]
            hi[i][idx] += eps
            lo[i][idx] -= eps
            f_hi = float(fn([Tensor(x) for x in hi]).data)
            f_lo = float(fn([Tensor(x) for x in lo]).data)
            g[idx] = (f_hi - f_lo) / (2 * eps)
        grads.append(g)
    return grads


def tape_grads(fn, arrays):
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(leaves)
    g = tape.backward(out, wrt=leaves)
    return [g[t.id] for t in leaves]


def rel_err(ad, fd):
    return max(float(np.max(np.abs(a - f) / np.maximum(1.0, np.abs(f)))) for a, f in zip(ad, fd))


def random_channel(rng, m, k, n_r, n_t, scale=1.0):
    return scale * (rng.normal(size=(m, k * n_r, n_t)) + 1j * rng.normal(size=(m, k * n_r, n_t))) / np.sqrt(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> one-line verdict, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
