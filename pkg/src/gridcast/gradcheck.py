"""Central-difference gradient checking utilities (float64)."""

import numpy as np


def numerical_gradient(loss_fn, array, h=1e-5):
    """Estimate d loss / d array entrywise with central differences.

    ``loss_fn`` takes no arguments and must see mutations of ``array``
    (i.e. the model holds a reference to it).  ``array`` is restored on exit.
    """
    g = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return g


def relative_error(a, b, floor=1e-8):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
