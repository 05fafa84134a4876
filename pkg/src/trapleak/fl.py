"""Federated learning rounds: users compute plain gradients, the server averages them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .initializers import ForwardingPlan, TrapConfig, init_conv_forwarding, init_trap_layer, make_rng
from .nn import DimensionError, Model, ModelGradients, gradients, sgd_step

__all__ = [
    "UserNode",
    "RoundConfig",
    "GradientUpdate",
    "TrapRecipe",
    "InsufficientDataError",
    "local_gradients",
    "aggregate",
    "dispatch_model",
    "run_round",
    "write_transcript",
    "read_transcript",
]


class InsufficientDataError(ValueError):
    pass


@dataclass
class UserNode:
    id: int
    features: np.ndarray
    labels: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if len(self.features) == 0:
            raise ValueError(f"user {self.id} has no data")
        if len(self.features) != len(self.labels):
            raise DimensionError(f"user {self.id}: {len(self.features)} points, "
                                 f"{len(self.labels)} labels")
        if np.issubdtype(np.asarray(self.features).dtype, np.floating):
            if self.features.min() < 0 or self.features.max() > 1:
                raise ValueError(f"user {self.id}: features must be scaled to [0, 1]")


@dataclass(frozen=True)
class RoundConfig:
    M: int = 1
    B: int = 100
    k: int = 1
    eta: float = 0.1

    def __post_init__(self):
        if self.M < 1 or self.B < 1 or self.k < 1:
            raise ValueError(f"M, B and k must be >= 1, got {self.M}, {self.B}, {self.k}")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")


@dataclass
class GradientUpdate:
    user_id: int
    round: int
    grads: ModelGradients
    B: int
    k: int
    # evaluation-only bookkeeping: which local points went into the update
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class TrapRecipe:
    """Active-attacker re-initialization applied to dispatched models.

    ``layer`` is the dense layer receiving trap weights; with ``conv_forwarding``
    the conv stack in front of it is set to forward the input first.
    ``targets`` limits the recipe to those user ids (None means everyone).
    """

    trap: TrapConfig
    layer: int | None = None
    conv_forwarding: bool = False
    input_shape: tuple | None = None
    targets: frozenset | None = None
    plan: ForwardingPlan | None = None

    def applies_to(self, user_id) -> bool:
        return self.targets is None or user_id in self.targets


def local_gradients(user: UserNode, model: Model, B: int, k: int = 1, rng=None,
                    round_index: int = 0) -> GradientUpdate:
    """Mean of ``k`` batch-averaged mini-batch gradients, sampled without replacement."""
    rng = make_rng(user.seed if rng is None else rng)
    n = len(user.features)
    if n < B * k:
        raise InsufficientDataError(f"user {user.id} has {n} points, needs B*k = {B * k}")
    idx = rng.choice(n, B * k, replace=False)
    batches = [gradients(model, user.features[part], user.labels[part])
               for part in idx.reshape(k, B)]
    grads = batches[0] if k == 1 else ModelGradients.mean(batches)
    return GradientUpdate(user.id, round_index, grads, B, k, idx)


def aggregate(updates: Sequence[GradientUpdate]) -> ModelGradients:
    """Unweighted elementwise mean of the uploaded gradients."""
    if not updates:
        raise ValueError("no updates to aggregate")
    return ModelGradients.mean([u.grads for u in updates])


def dispatch_model(model: Model, recipe: TrapRecipe | None = None, user_id=None, rng=None) -> Model:
    """Copy of the central model, re-initialized by ``recipe`` when it targets this user."""
    sent = model.copy()
    if recipe is None or not recipe.applies_to(user_id):
        return sent
    rng = make_rng(recipe.trap.seed if rng is None else rng)
    layer = recipe.layer if recipe.layer is not None else sent.dense_indices()[0]
    if layer >= len(sent.layers):
        raise ValueError(f"recipe targets layer {layer}, model has {len(sent.layers)}")
    if recipe.conv_forwarding:
        plan = recipe.plan or ForwardingPlan(recipe.input_shape or ())
        recipe.plan = init_conv_forwarding(sent, plan, rng)
    init_trap_layer(sent.layers[layer], recipe.trap, rng)
    sent.touch()
    return sent


def run_round(central: Model, users: Sequence[UserNode], cfg: RoundConfig, rng=None,
              hooks: Sequence[Callable] = (), recipe: TrapRecipe | None = None,
              round_index: int = 0):
    """One protocol round; returns ``(updates, new_central_model)``.

    Each hook is called as ``hook(updates, dispatched_models)`` before
    aggregation and must not modify its arguments.
    """
    rng = make_rng(rng)
    if len(users) < cfg.M:
        raise ValueError(f"round needs {cfg.M} users, only {len(users)} available")
    chosen = rng.choice(len(users), cfg.M, replace=False)
    updates, sent = [], {}
    for j in chosen:
        user = users[j]
        local = dispatch_model(central, recipe, user.id, rng)
        sent[user.id] = local
        updates.append(local_gradients(user, local, cfg.B, cfg.k, rng, round_index))
    for hook in hooks:
        hook(updates, sent)
    new = central.copy()
    if cfg.eta > 0:
        sgd_step(new, aggregate(updates), cfg.eta)
    return updates, new


def _grads_to_json(grads: ModelGradients):
    return [{k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in g.items()}
            for g in grads.layers]


def _grads_from_json(layers) -> ModelGradients:
    return ModelGradients([{k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                            for k, v in g.items()} for g in layers])


def write_transcript(path, updates: Sequence[GradientUpdate], config: dict | None = None,
                     seed=None, append: bool = False) -> Path:
    """Append one JSON line per update (gradients, indices, seed and config)."""
    path = Path(path)
    with open(path, "a" if append else "w") as fh:
        for u in updates:
            fh.write(json.dumps({
                "round": u.round, "user": u.user_id, "B": u.B, "k": u.k, "seed": seed,
                "config": config or {}, "indices": np.asarray(u.indices).tolist(),
                "grads": _grads_to_json(u.grads),
            }) + "\n")
    return path


def read_transcript(path) -> list[GradientUpdate]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(GradientUpdate(rec["user"], rec["round"], _grads_from_json(rec["grads"]),
                                      rec["B"], rec["k"], np.array(rec["indices"], dtype=int)))
    return out
