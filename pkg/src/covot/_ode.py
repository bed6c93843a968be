"""Fixed-step classical Runge-Kutta integration on a prescribed grid."""
from __future__ import annotations

from typing import Callable

import numpy as np


def rk4(f: Callable[[float, np.ndarray], np.ndarray], y0: np.ndarray,
        times: np.ndarray) -> np.ndarray:
    """Integrate ``y' = f(t, y)`` with one RK4 step per grid interval.

    ``y0`` may have any shape; the result has shape ``(len(times),) + y0.shape``.
    """
    y = np.array(y0, dtype=float)
    out = np.empty((len(times),) + y.shape)
    out[0] = y
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = y
    return out


def uniform_grid(N: int, T: float = 1.0) -> np.ndarray:
    """``N + 1`` equally spaced nodes on ``[0, T]``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    return np.linspace(0.0, T, N + 1)
