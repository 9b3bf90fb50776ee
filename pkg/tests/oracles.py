"""Shared independent oracles: finite differences and error metrics."""

import numpy as np


def fd_grad(f, x0, h=1e-5):
    """Central finite-difference gradient of scalar f at flat vector x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_jacobian(f, x0, h=1e-5):
    """Central finite-difference Jacobian of vector f at vector x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    cols = []
    for i in range(d):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        cols.append((f(xp) - f(xm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b, floor=1e-6):
    """Max relative error with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
