"""Shared oracles and helpers for the test suite."""

import numpy as np
import pytest

from proxbundle.rng import Rng
from proxbundle.tensor import Tape, Tensor, backward

# gradient checks: central differences, relative tolerance with absolute floor
FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7
KINK_MARGIN = 1e-3

_KINK_OPS = {"relu", "abs", "sign"}


@pytest.fixture
def rng():
    return Rng(0xA11CE)


def kink_margin(tape: Tape) -> float:
    """Smallest |input| at any kinked primitive recorded on the tape."""
    margin = np.inf
    for node in tape.nodes:
        if node.op in _KINK_OPS:
            margin = min(margin, float(np.abs(node.inputs[0].data).min()))
    return margin


def fd_gradient(fn, param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the scalar fn() w.r.t. param entries."""
    base = param.data.copy()
    grad = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            param.data = base.copy()
            param.data[i, j] += h
            fp = fn()
            param.data = base.copy()
            param.data[i, j] -= h
            fm = fn()
            grad[i, j] = (fp - fm) / (2.0 * h)
    param.data = base
    return grad


def assert_gradients_match(build_loss, params, rtol=FD_RTOL, atol=FD_ATOL,
                           reject_kinks=True, max_tries=50):
    """Check reverse-mode gradients of a scalar loss against finite differences.

    ``build_loss()`` must run the forward pass with current parameter values
    and return the scalar loss Tensor.  Instances whose tape passes within
    KINK_MARGIN of a nondifferentiable point are rejected and the caller is
    expected to resample (signalled by the return value False).
    """
    with Tape() as tape:
        loss = build_loss()
    if reject_kinks and kink_margin(tape) < KINK_MARGIN:
        return False
    grads = backward(tape, loss)
    for param in params:
        ad = grads[param]
        fd = fd_gradient(lambda: _loss_value(build_loss), param)
        err = np.abs(ad - fd)
        tol = np.maximum(atol, rtol * np.abs(fd))
        assert np.all(err <= tol), (
            f"gradient mismatch: max err {err.max():.3e} vs tol {tol[err.argmax() // err.shape[1], err.argmax() % err.shape[1]]:.3e}"
        )
    return True


def _loss_value(build_loss) -> float:
    return build_loss().item()


def run_gradient_trials(make_instance, n_trials: int, rtol=FD_RTOL, atol=FD_ATOL):
    """Sample instances until ``n_trials`` kink-free gradient checks pass."""
    done = 0
    attempts = 0
    while done < n_trials:
        attempts += 1
        assert attempts < 20 * n_trials, "too many kink rejections"
        build_loss, params = make_instance()
        if assert_gradients_match(build_loss, params, rtol=rtol, atol=atol):
            done += 1
    return done
