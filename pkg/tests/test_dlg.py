import numpy as np
import pytest

from trapleak.architectures import small_dense
from trapleak.dlg import dlg_reconstruct, matching_loss, outer_gradient, softmax
from trapleak.initializers import init_random
from trapleak.nn import DimensionError, gradients


def _setup(seed=0, n_in=6, classes=3):
    rng = np.random.default_rng(seed)
    model = small_dense(n_in, 5, classes)
    init_random(model, "xavier_uniform", rng)
    x = rng.random(n_in)
    y = int(rng.integers(0, classes))
    return model, x, y, gradients(model, x[None], [y])


def test_zero_loss_at_true_pair():
    model, x, y, target = _setup()
    logits = np.full(3, -50.0)
    logits[y] = 50.0  # softmax is one-hot to double precision
    assert matching_loss(model, target, x, logits) == pytest.approx(0.0, abs=1e-30)


def test_loss_matches_loop_oracle():
    model, x, y, target = _setup(1)
    rng = np.random.default_rng(2)
    x_hat, y_hat = rng.normal(size=6), rng.normal(size=3)
    dummy = gradients(model, x_hat[None], softmax(y_hat)[None])
    ref = 0.0
    for i, name, g in target:
        for a, b in zip(dummy[i][name].ravel(), g.ravel()):
            ref += (a - b) ** 2
    assert matching_loss(model, target, x_hat, y_hat) == pytest.approx(ref, rel=1e-12)
    assert ref >= 0


def test_loss_shape_mismatch():
    model, x, y, target = _setup()
    other = small_dense(7, 5, 3)
    with pytest.raises(DimensionError):
        matching_loss(other, target, np.zeros(7), np.zeros(3))


def test_outer_gradient_is_descent_direction():
    model, x, y, target = _setup(3)
    rng = np.random.default_rng(4)
    x_hat, y_hat = rng.normal(size=6), rng.normal(size=3)
    gx, gy = outer_gradient(model, target, x_hat, y_hat)
    before = matching_loss(model, target, x_hat, y_hat)
    after = matching_loss(model, target, x_hat - 1e-3 * gx, y_hat - 1e-3 * gy)
    assert after < before


def test_outer_gradient_step_size_agreement():
    # two finite-difference steps agree, so the estimate is not dominated by round-off
    model, x, y, target = _setup(5)
    rng = np.random.default_rng(6)
    x_hat, y_hat = rng.normal(size=6), rng.normal(size=3)
    a = np.concatenate(outer_gradient(model, target, x_hat, y_hat, h=1e-4))
    b = np.concatenate(outer_gradient(model, target, x_hat, y_hat, h=1e-6))
    assert np.max(np.abs(a - b)) <= 1e-3 * max(np.max(np.abs(a)), 1e-12)


def test_restarts_deterministic_and_best_selected():
    model, x, y, target = _setup(7)
    best1, runs1 = dlg_reconstruct(model, target, (6,), iters=15, alpha=0.05, restarts=2, rng=11)
    best2, runs2 = dlg_reconstruct(model, target, (6,), iters=15, alpha=0.05, restarts=2, rng=11)
    assert [r.losses for r in runs1] == [r.losses for r in runs2]
    assert best1.final_loss == min(r.final_loss for r in runs1)
    assert all(l >= 0 for r in runs1 for l in r.losses)


def test_loss_trace_decreases():
    model, x, y, target = _setup(8)
    best, _ = dlg_reconstruct(model, target, (6,), iters=60, alpha=0.05, rng=0)
    assert best.losses[-1] < best.losses[0]
    assert best.iterations == 60 and not best.diverged


def test_divergence_reported_not_raised():
    model, x, y, target = _setup(9)
    huge = target.map(lambda v: np.full_like(v, 1e300))  # squared distance overflows
    best, runs = dlg_reconstruct(model, huge, (6,), iters=5, alpha=0.1, rng=0)
    assert runs[0].diverged and best.iterations == 0
    assert best.final_loss == float("inf")


def test_invalid_arguments():
    model, x, y, target = _setup()
    with pytest.raises(ValueError):
        dlg_reconstruct(model, target, (6,), restarts=0)
