"""Shared test helpers: the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest


def central_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. arr, in place.

    f re-runs the forward pass reading the current contents of arr; the
    array is restored after each perturbation.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a-b| / max(floor, |a|, |b|).

    The floor turns the comparison absolute for tiny gradients, where
    central differences themselves only carry ~1e-11 absolute accuracy.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
