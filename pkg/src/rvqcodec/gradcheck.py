"""Central finite-difference oracles for verifying backward rules.

These helpers only ever call a forward function, so they stay independent of
the autodiff path they are used to check. All checks should run at float64.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Per-coordinate central difference of a scalar-valued f at x."""
    x = np.array(x, dtype=np.float64, copy=True)  # x is perturbed in place
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def directional_difference(f, x: np.ndarray, v: np.ndarray, h: float = 1e-6) -> float:
    """Central difference of f along direction v (for large inputs)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float((f(x + h * v) - f(x - h * v)) / (2.0 * h))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| scaled by the larger gradient magnitude (floored at 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom
