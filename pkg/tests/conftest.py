"""Shared test helpers: finite-difference gradient checks and fixtures."""

import numpy as np

from texsyn.tensor import Tensor

FD_STEP = 1e-3
FD_TOL = 1e-4

ACCEPTANCE_LINES = []


def acceptance_line(line):
    """Record a criterion summary so it survives output capture."""
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(fn, arrays, which, step=FD_STEP):
    """Central finite differences of scalar fn(*arrays) w.r.t. arrays[which]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(*base)
        flat[i] = keep - step
        lo = fn(*base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_error(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-8)


def check_grads(build, arrays, tol=FD_TOL, step=FD_STEP):
    """Compare autodiff gradients of build(*leaves) against finite differences.

    build takes Tensor leaves and returns a scalar Tensor; arrays are the leaf
    values. Checks every leaf and returns the worst relative error seen.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*leaves)
    loss.backward()

    def scalar_fn(*vals):
        plain = [Tensor(v) for v in vals]
        return build(*plain).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"leaf {i} received no gradient"
        fd = numeric_grad(scalar_fn, arrays, i, step)
        err = rel_error(leaf.grad, fd)
        worst = max(worst, err)
        assert err < tol, f"leaf {i}: autodiff/finite-difference mismatch, rel err {err:.3g}"
    return worst


def checkerboard(size=32, cell=8, channels=1):
    """Procedural black/white checkerboard exemplar in [0, 1]."""
    r = np.arange(size) // cell
    board = ((r[:, None] + r[None, :]) % 2).astype(np.float64)
    return np.repeat(board[:, :, None], channels, axis=2)
