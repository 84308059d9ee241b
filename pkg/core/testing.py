"""Finite-difference helpers used by the gradient tests of every app."""

import numpy as np

FD_STEP = 1e-6


def numerical_gradient(fn, x, step=FD_STEP, indices=None):
    """Central differences of scalar fn at x (any shape).

    When `indices` is given only those flat coordinates are perturbed and a
    1-D array in the same order is returned.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    grad = []
    for i in coords:
        original = flat[i]
        flat[i] = original + step
        plus = fn(x)
        flat[i] = original - step
        minus = fn(x)
        flat[i] = original
        grad.append((plus - minus) / (2.0 * step))
    grad = np.array(grad)
    return grad.reshape(x.shape) if indices is None else grad


def relative_error(analytic, numeric, floor=1e-8):
    """Max-norm error relative to the larger gradient's max norm."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def assert_gradient_close(testcase, analytic, numeric, rtol=1e-4, floor=1e-6):
    err = relative_error(analytic, numeric, floor=floor)
    testcase.assertLess(err, rtol, f"gradient mismatch: relative error {err:.3e}")
