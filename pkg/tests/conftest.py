import numpy as np
import pytest

from mqt import autodiff as ad
from mqt.autodiff import Tensor


def project(out, seed=0):
    """Reduce any tensor to a scalar through a fixed random projection."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_all(ad.mul(out, Tensor(r)))


def gradcheck(fn, inputs, eps=1e-5, max_entries=None, seed=0):
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must return a Tensor; non-scalars are projected.  Only
    inputs with ``requires_grad`` are checked.  ``max_entries`` probes a random
    subset of each input's entries (the norm is taken over that subset).
    """
    def scalar():
        out = fn(*inputs)
        return out if out.data.size == 1 else project(out, seed)

    for t in inputs:
        t.grad = None
    scalar().backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        with ad.no_grad():
            return float(scalar().data)

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        a = np.zeros_like(t.data) if a is None else a
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        num = ad.numerical_grad(value, t.data, eps=eps, indices=idx)
        if idx is None:
            err = ad.relative_error(a, num, floor=1e-8)
        else:
            err = ad.relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx], floor=1e-8)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, repeated at the end of the run so they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
