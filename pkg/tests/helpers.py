"""Shared test oracles, independent of the library's backward pass.

The central-difference oracle evaluates a loss callable twice per scalar
entry and never touches the autodiff graph, so gradient tests compare two
genuinely independent computations.
"""

from __future__ import annotations

import numpy as np

from geofield.autodiff import no_grad


def central_difference(loss_fn, arrays, h=1e-6):
    """Central finite differences of loss_fn w.r.t. each array, entry by entry.

    loss_fn takes no arguments and must read the arrays in place; it is
    evaluated under no_grad. Returns one gradient array per input array.
    """
    grads = []
    with no_grad():
        for arr in arrays:
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_fn()
                flat[i] = orig - h
                lo = loss_fn()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * h)
            grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8, label=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > (rtol * denom + atol)
    if bad.any():
        idx = np.unravel_index(np.argmax(err - rtol * denom), analytic.shape)
        raise AssertionError(
            f"gradient mismatch {label} at {idx}: analytic={analytic[idx]!r} "
            f"numeric={numeric[idx]!r} abs_err={err[idx]:.3e}"
        )
