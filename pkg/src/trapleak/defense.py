"""Gradient clipping, Gaussian noising, pruning and a DPSGD-style round."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .fl import GradientUpdate, InsufficientDataError, UserNode
from .initializers import make_rng
from .nn import Model, ModelGradients, iter_per_example_gradients

__all__ = ["DefenseConfig", "clip", "noise", "prune", "dpsgd_round"]


@dataclass(frozen=True)
class DefenseConfig:
    clip_norm: float | None = None
    noise_sigma: float = 0.0
    noise_site: str = "user"
    prune_fraction: float = 0.0
    dpsgd: bool = False
    malicious_server: bool = False

    def __post_init__(self):
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.noise_site not in ("user", "server"):
            raise ValueError("noise_site must be 'user' or 'server'")
        if not 0 <= self.prune_fraction < 1:
            raise ValueError("prune_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        return cls(**d)


def clip(update: ModelGradients, c: float) -> ModelGradients:
    """Scale the whole update so its global L2 norm is at most ``c``."""
    if not c > 0:
        raise ValueError(f"clip norm must be positive, got {c}")
    return update.scale(1.0 / max(1.0, update.norm() / c))


def noise(update: ModelGradients, sigma: float, rng=None) -> ModelGradients:
    if sigma < 0:
        raise ValueError("noise scale must be nonnegative")
    if sigma == 0:
        return update.copy()
    rng = make_rng(rng)
    return update.map(lambda v: v + rng.normal(0.0, sigma, v.shape))


def prune(update: ModelGradients, fraction: float) -> ModelGradients:
    """Zero the ``fraction`` of entries with the smallest magnitude (global ranking)."""
    if not 0 <= fraction < 1:
        raise ValueError(f"prune fraction must lie in [0, 1), got {fraction}")
    flat = update.flat()
    n_drop = int(np.floor(fraction * flat.size))
    if n_drop == 0:
        return update.copy()
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:n_drop]] = False
    out, start = [], 0
    for layer in update.layers:
        d = {}
        for name, v in layer.items():
            mask = keep[start : start + v.size].reshape(v.shape)
            d[name] = np.where(mask, v, 0.0)
            start += v.size
        out.append(d)
    return ModelGradients(out)


def dpsgd_round(users: Sequence[UserNode], model: Model, c: float, sigma: float, B: int,
                noise_site: str = "server", malicious_server: bool = False, rng=None):
    """Per-example clipping at the users, Gaussian noise on the average.

    Noise has standard deviation ``sigma * c / B`` and is added by each user
    (``noise_site="user"``) or by the server after collecting the clipped
    updates. A malicious server skips its noise step. Returns
    ``(uploaded_updates, aggregate)``; the uploads are what the server sees.
    """
    if not c > 0:
        raise ValueError("clip norm must be positive")
    if sigma < 0:
        raise ValueError("noise multiplier must be nonnegative")
    rng = make_rng(rng)
    std = sigma * c / B
    uploads = []
    for user in users:
        n = len(user.features)
        if n < B:
            raise InsufficientDataError(f"user {user.id} has {n} points, needs {B}")
        idx = rng.choice(n, B, replace=False)
        total = None
        for g in iter_per_example_gradients(model, user.features[idx], user.labels[idx]):
            g = clip(g, c)
            total = g if total is None else total + g
        avg = total.scale(1.0 / B)
        if noise_site == "user":
            avg = noise(avg, std, rng)
        uploads.append(GradientUpdate(user.id, 0, avg, B, 1, idx))
    agg = ModelGradients.mean([u.grads for u in uploads])
    if noise_site == "server" and not malicious_server:
        agg = noise(agg, std, rng)
    return uploads, agg
