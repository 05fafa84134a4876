"""Gradient-matching reconstruction baseline (dummy data optimized by gradient descent).

The outer gradient of the matching loss is a second-order quantity; it is
estimated here with central finite differences, which is affordable for the
small dense models this baseline is meant for.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .initializers import make_rng
from .nn import DimensionError, Model, ModelGradients, forward, gradients

__all__ = ["DlgRun", "matching_loss", "outer_gradient", "dlg_reconstruct", "softmax"]


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _soft_label(model: Model, y_hat):
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if model.task == "binary":
        return 0.5 * (1.0 + np.tanh(0.5 * y_hat[:1]))
    return softmax(y_hat)[None, :]


def matching_loss(model: Model, target: ModelGradients, x_hat, y_hat) -> float:
    """Squared distance between ``target`` and the gradients induced by (x_hat, y_hat).

    ``y_hat`` holds label logits; the relaxed label is their softmax (sigmoid
    for binary models).
    """
    x = np.asarray(x_hat, dtype=np.float64)[None]
    dummy = gradients(model, x, _soft_label(model, y_hat))
    if dummy.shapes() != target.shapes():
        raise DimensionError("target gradients do not match the model")
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported by the caller
        return float(sum(np.sum((dummy[i][k] - g) ** 2) for i, k, g in target))


def outer_gradient(model, target, x_hat, y_hat, h: float = 1e-5):
    """Central-difference gradient of the matching loss w.r.t. (x_hat, y_hat)."""
    x_hat = np.array(x_hat, dtype=np.float64)
    y_hat = np.array(y_hat, dtype=np.float64)
    gx = np.zeros_like(x_hat)
    gy = np.zeros_like(y_hat)
    for arr, out in ((x_hat, gx), (y_hat, gy)):
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = matching_loss(model, target, x_hat, y_hat)
            flat[j] = keep - h
            down = matching_loss(model, target, x_hat, y_hat)
            flat[j] = keep
            gflat[j] = (up - down) / (2 * h)
    return gx, gy


@dataclass
class DlgRun:
    x_hat: np.ndarray
    y_hat: np.ndarray
    iterations: int
    alpha: float
    restart: int
    losses: list = field(default_factory=list)
    wallclock_s: float = 0.0
    diverged: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("inf")


def _single_run(model, target, x_shape, n_labels, iters, alpha, rng, restart, h):
    x_hat = rng.normal(0.0, 1.0, x_shape)
    y_hat = rng.normal(0.0, 1.0, n_labels)
    run = DlgRun(x_hat, y_hat, 0, alpha, restart)
    start = time.perf_counter()
    for _ in range(iters):
        loss = matching_loss(model, target, x_hat, y_hat)
        if not np.isfinite(loss):
            run.diverged = True
            break
        run.losses.append(loss)
        gx, gy = outer_gradient(model, target, x_hat, y_hat, h)
        x_hat = x_hat - alpha * gx
        y_hat = y_hat - alpha * gy
        run.iterations += 1
    else:
        final = matching_loss(model, target, x_hat, y_hat)
        run.diverged = not np.isfinite(final)
        run.losses.append(final)
    run.x_hat, run.y_hat = x_hat, y_hat
    run.wallclock_s = time.perf_counter() - start
    return run


def dlg_reconstruct(model: Model, target: ModelGradients, x_shape, iters: int = 200,
                    alpha: float = 0.1, restarts: int = 1, rng=None, h: float = 1e-5):
    """Best run (lowest final matching loss) over ``restarts`` Gaussian starts.

    Returns ``(best, runs)``. Divergence is flagged on the run, never raised.
    """
    if iters < 0 or restarts < 1:
        raise ValueError("iters must be >= 0 and restarts >= 1")
    rng = make_rng(rng)
    n_labels = 1 if model.task == "binary" else _n_classes(model, x_shape)
    runs = [_single_run(model, target, tuple(x_shape), n_labels, iters, alpha, rng, r, h)
            for r in range(restarts)]
    finite = [r for r in runs if not r.diverged] or runs
    best = min(finite, key=lambda r: r.final_loss)
    return best, runs


def _n_classes(model, x_shape):
    logits, _ = forward(model, np.zeros((1,) + tuple(x_shape)))
    return logits.shape[1]
