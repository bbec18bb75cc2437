"""Shared test helpers: finite-difference oracle and data paths."""

from pathlib import Path

import numpy as np
import pytest

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def finite_difference_gradients(loss_fn, params, step=1e-5):
    """Central-difference gradient oracle.

    loss_fn takes no arguments and returns a float computed from the current
    values of `params`; entries of each parameter are perturbed in place.
    """
    out = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn()
            flat[i] = orig - step
            f_minus = loss_fn()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * step)
        out[p] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-3):
    """Worst-case elementwise relative error with a floor for tiny gradients."""
    worst = 0.0
    for p, a in analytic.items():
        n = numeric[p]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def require_dataset(name):
    """Return the path to a vendored dataset CSV or skip the calling test."""
    path = DATA_DIR / f"{name}.csv"
    if not path.exists():
        pytest.skip(f"{name} dataset CSV not present under data/ (run `fedgraphssl fetch`)")
    return path
