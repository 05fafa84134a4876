"""Shared oracles for the test suite."""

import numpy as np

from trapleak.nn import forward, gradients, loss

FD_FLOOR = 1e-6  # entries smaller than this are compared absolutely


def numeric_gradients(model, x, y, h=1e-5):
    """Central differences of the mean loss for every parameter entry."""
    out = []
    for layer in model.layers:
        grads = {}
        for name, arr in layer.param_arrays().items():
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                model.touch()
                up = loss(forward(model, x)[0], y, model.task)
                flat[j] = keep - h
                model.touch()
                down = loss(forward(model, x)[0], y, model.task)
                flat[j] = keep
                gflat[j] = (up - down) / (2 * h)
            grads[name] = g
        out.append(grads)
    model.touch()
    return out


def fd_check(model, x, y, h=1e-5):
    """Largest entrywise relative disagreement between backward() and central differences."""
    analytic = gradients(model, x, y)
    numeric = numeric_gradients(model, x, y, h)
    worst = 0.0
    for i, name, a in analytic:
        f = numeric[i][name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)) if a.size else 0.0)
    return worst
