import numpy as np
import pytest

from mofetime import tensor as T


def central_difference(fn, arrays, step=1e-5):
    """Numeric gradient of scalar ``fn(*arrays)`` w.r.t. every array entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(*arrays)
            flat[i] = orig - step
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(a, b, zero_tol=1e-10):
    a, b = np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)
    denom = np.maximum(np.abs(a), np.abs(b))
    err = np.where(denom < zero_tol, 0.0, np.abs(a - b) / np.where(denom == 0, 1, denom))
    return float(err.max())


def check_op_gradient(build, arrays, step=1e-5):
    """Compare reverse-mode grads of ``sum(build(*tensors) * w)`` with central differences.

    The random projection ``w`` makes every output entry matter.
    """
    rng = np.random.default_rng(12345)
    with T.no_grad():
        shape = build(*[T.tensor(a) for a in arrays]).shape
    w = rng.standard_normal(shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((build(*[T.tensor(a) for a in arrs]).data * w).sum())

    leaves = [T.tensor(a, requires_grad=True) for a in arrays]
    T.reduce_sum(T.mul(build(*leaves), T.tensor(w))).backward()
    numeric = central_difference(scalar, [a.copy() for a in arrays], step)
    return max(max_rel_error(l.grad, n) for l, n in zip(leaves, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---- acceptance reporting: one line per criterion in the terminal summary

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(cid: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"{cid} {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
