"""Shared numerical oracles for the test suite.

The finite-difference gradient here is the independent check for every
reverse-mode gradient in the package; it never calls into the autodiff
engine itself.
"""

import numpy as np


def fd_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def fd_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Dense Jacobian of vector-valued f at x via central differences."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = np.asarray(f(x)).reshape(-1).copy()
        flat[i] = orig - eps
        fm = np.asarray(f(x)).reshape(-1).copy()
        flat[i] = orig
        cols.append((fp - fm) / (2.0 * eps))
    return np.stack(cols, axis=1)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8, label=""):
    """Relative tolerance check with an absolute floor for vanishing entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape, (
        f"{label}: shapes differ {analytic.shape} vs {numeric.shape}"
    )
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > rtol * denom + atol
    assert not bad.any(), (
        f"{label}: gradient mismatch at {bad.sum()} / {bad.size} entries, "
        f"max abs diff {np.abs(analytic - numeric).max():.3e}"
    )
