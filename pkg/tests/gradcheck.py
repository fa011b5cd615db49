"""Finite-difference gradient checking helpers shared across test modules."""

from __future__ import annotations

import numpy as np


def pack(arrays):
    """Flatten a list of arrays into one vector plus the shape list."""
    return (np.concatenate([np.asarray(a, dtype=np.float64).ravel()
                            for a in arrays]),
            [np.asarray(a).shape for a in arrays])


def unpack(flat, shapes):
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        out.append(flat[offset:offset + size].reshape(shape).copy())
        offset += size
    return out


def central_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function at a flat vector."""
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Worst relative disagreement over coordinates with magnitude > floor.

    Coordinates where both sides are below the floor are compared
    absolutely against the floor instead.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    worst = 0.0
    if np.any(mask):
        worst = float(np.max(np.abs(analytic - numeric)[mask] / scale[mask]))
    if np.any(~mask):
        # Tiny coordinates must still agree in absolute terms.
        worst = max(worst, float(np.max(np.abs(analytic - numeric)[~mask])))
    return worst
