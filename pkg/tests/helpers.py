"""Shared numerical oracles for the test suite."""
import numpy as np


def diff5(fn, x, h):
    """Five-point central difference of a scalar or vector function of one variable."""
    return (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)


def grad5(fn, x, h=1e-5):
    """Five-point central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = 1.0
        out[i] = diff5(lambda t: fn(x + t * e), 0.0, h)
    return out


def jac5(fn, x, h=1e-5):
    """Five-point central-difference Jacobian, J[i, j] = d fn_i / d x_j."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = 1.0
        cols.append(diff5(lambda t: np.asarray(fn(x + t * e)), 0.0, h))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))
