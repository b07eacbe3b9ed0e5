from __future__ import annotations

import numpy as np
import pytest

from courtgraph import autodiff as ad


def central_difference(f, arr: np.ndarray, index: tuple, h: float = 1e-5) -> float:
    """Independent derivative oracle: central finite difference on one entry.

    `f` must be a pure function of the current contents of `arr`.
    """
    orig = arr[index]
    arr[index] = orig + h
    f_plus = f()
    arr[index] = orig - h
    f_minus = f()
    arr[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def check_gradients(build_loss, params: dict[str, ad.Tensor], h=1e-5, tol=1e-4, entries=None, rng=None):
    """Compare tape gradients of a scalar loss against central differences.

    build_loss() runs a fresh forward pass from the current parameter values
    and returns the scalar loss tensor. If `entries` is given it is a list of
    (key, flat_index) pairs; otherwise every entry of every parameter is
    checked.
    """
    ad.zero_grads(params)
    with ad.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    grads = {k: p.grad.copy() for k, p in params.items()}

    def value():
        with ad.no_tape():
            return build_loss().item()

    if entries is None:
        entries = [(k, i) for k, p in params.items() for i in range(p.size)]
    worst = 0.0
    for key, flat in entries:
        p = params[key]
        idx = np.unravel_index(flat, p.values.shape)
        fd = central_difference(value, p.values, idx, h=h)
        analytic = grads[key][idx]
        err = rel_error(analytic, fd)
        worst = max(worst, err)
        assert err < tol, f"grad mismatch at {key}[{idx}]: tape={analytic} fd={fd} rel={err:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
