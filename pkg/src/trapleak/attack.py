"""Analytic input extraction from dense-layer gradients and its success metrics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .initializers import ForwardingPlan, forwarded_positions
from .nn import Dense, DimensionError, Embedding, Model, ModelGradients

__all__ = [
    "EPS_ACTIVE",
    "TOL_REL",
    "ExtractionCandidate",
    "AttackMetrics",
    "EmbeddingLookup",
    "ConfigurationError",
    "extract_candidates",
    "match_candidates",
    "score",
    "metrics_from_matches",
    "extract_from_model",
    "build_embedding_lookup",
    "reconstruct_tokens",
    "SENTINEL",
]

EPS_ACTIVE = 1e-12
TOL_REL = 1e-6
SENTINEL = -1


class ConfigurationError(ValueError):
    pass


@dataclass
class ExtractionCandidate:
    row: int
    x_hat: np.ndarray
    scale: float


@dataclass
class AttackMetrics:
    A: float
    P: float
    R: float
    N: int
    B: int
    G0: int
    B0: int
    active: int

    @property
    def precision_active(self) -> float:
        """Exact-extraction rows as a fraction of active rows."""
        return self.G0 / self.active if self.active else 0.0

    def as_dict(self) -> dict:
        return {"A": self.A, "P": self.P, "R": self.R, "N": self.N, "B": self.B,
                "G0": self.G0, "B0": self.B0, "active": self.active}


def extract_candidates(w_grad, b_grad, eps_active: float = EPS_ACTIVE) -> list[ExtractionCandidate]:
    """Rescale every active weight-gradient row by its inverse bias gradient."""
    w_grad = np.asarray(w_grad, dtype=np.float64)
    b_grad = np.asarray(b_grad, dtype=np.float64)
    if w_grad.ndim != 2 or b_grad.shape != (w_grad.shape[0],):
        raise DimensionError(f"weight gradient {w_grad.shape} and bias gradient {b_grad.shape} "
                             "do not belong to one dense layer")
    rows = np.flatnonzero(np.abs(b_grad) > eps_active)
    x_hat = w_grad[rows]
    x_hat /= b_grad[rows, None]
    return [ExtractionCandidate(int(i), x_hat[n], float(b_grad[i])) for n, i in enumerate(rows)]


def match_candidates(candidates, ground_truth, chunk: int = 128):
    """Nearest ground-truth point and its relative L2 error for each candidate.

    Returns ``(nearest, rel_error)`` arrays aligned with ``candidates``.
    Candidates are processed ``chunk`` at a time to bound memory on wide inputs.
    """
    truth = np.asarray(ground_truth, dtype=np.float64)
    truth = truth.reshape(truth.shape[0], -1)
    if truth.shape[0] == 0:
        raise ValueError("ground-truth batch is empty")
    n = len(candidates)
    nearest, rel = np.zeros(n, dtype=int), np.zeros(n)
    t2 = (truth * truth).sum(1)
    for start in range(0, n, chunk):
        X = np.stack([c.x_hat.ravel() for c in candidates[start:start + chunk]])
        if X.shape[1] != truth.shape[1]:
            raise DimensionError(f"candidates have {X.shape[1]} features, "
                                 f"ground truth {truth.shape[1]}")
        finite = np.all(np.isfinite(X), axis=1)
        X[~finite] = 0.0
        d2 = (X * X).sum(1)[:, None] + t2[None, :] - 2.0 * X @ truth.T
        near = np.argmin(d2, axis=1)
        # recompute the chosen distance directly, the expansion above cancels badly near zero
        X -= truth[near]
        dist = np.linalg.norm(X, axis=1)
        ref = np.sqrt(t2[near])
        r = np.where(ref > 0, dist / np.where(ref > 0, ref, 1.0), dist)
        nearest[start:start + len(X)] = near
        rel[start:start + len(X)] = np.where(finite, r, np.inf)
    return nearest, rel


def metrics_from_matches(nearest, rel_error, B: int, n_rows: int,
                         tol_rel: float = TOL_REL) -> AttackMetrics:
    """A, P and R from the output of :func:`match_candidates`."""
    if B < 1:
        raise ValueError("ground-truth batch is empty")
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    exact = np.asarray(rel_error) <= tol_rel
    G0 = int(exact.sum())
    B0 = int(np.unique(np.asarray(nearest)[exact]).size)
    active = len(rel_error)
    return AttackMetrics(A=active / n_rows, P=G0 / n_rows, R=B0 / B, N=n_rows, B=B,
                         G0=G0, B0=B0, active=active)


def score(candidates, ground_truth, n_rows: int, tol_rel: float = TOL_REL) -> AttackMetrics:
    """Active fraction A, extraction-precision P and extraction-recall R."""
    truth = np.asarray(ground_truth)
    if truth.shape[0] == 0:
        raise ValueError("ground-truth batch is empty")
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    nearest, rel = match_candidates(candidates, truth)
    return metrics_from_matches(nearest, rel, truth.shape[0], n_rows, tol_rel)


def _trainable_before(model: Model, target: int):
    return [i for i in range(target) if model.layers[i].params]


def extract_from_model(model: Model, grads: ModelGradients, target_layer: int | None = None,
                       plan: ForwardingPlan | None = None, input_shape=None,
                       eps_active: float = EPS_ACTIVE) -> list[ExtractionCandidate]:
    """Extract candidates at a dense layer and map them back to input space.

    Without earlier trainable layers the candidates are reshaped to
    ``input_shape``. Behind forwarding layers the carrier positions recorded in
    ``plan`` are gathered and divided by their accumulated scale factors.
    Behind an embedding layer the candidates stay in embedding space.
    """
    if target_layer is None:
        target_layer = model.dense_indices()[0]
    layer = model.layers[target_layer]
    if not isinstance(layer, Dense):
        raise ValueError(f"layer {target_layer} is not dense: {layer!r}")
    g = grads[target_layer]
    cands = extract_candidates(g["W"], g["b"], eps_active)
    upstream = _trainable_before(model, target_layer)
    if upstream and not (len(upstream) == 1 and isinstance(model.layers[upstream[0]], Embedding)):
        if plan is None:
            raise ValueError("extraction behind forwarding layers needs a ForwardingPlan")
        positions, factors = forwarded_positions(plan, layer.n_in)
        for c in cands:
            c.x_hat = (c.x_hat[positions] / factors).reshape(plan.input_shape)
        return cands
    shape = input_shape if input_shape is not None else (plan.input_shape if plan else None)
    if shape is not None:
        for c in cands:
            c.x_hat = c.x_hat.reshape(shape)
    return cands


def _quantize(vectors, precision: int):
    return np.rint(np.asarray(vectors, dtype=np.float64) * 10.0 ** precision).astype(np.int64)


def _key(q: np.ndarray) -> int:
    return int.from_bytes(hashlib.blake2b(q.tobytes(), digest_size=8).digest(), "little")


@dataclass
class EmbeddingLookup:
    """Hash of a rounded embedding vector -> token id."""

    table: dict
    precision: int = 6

    def lookup(self, vector) -> int:
        return self.table.get(_key(_quantize(vector, self.precision)), SENTINEL)

    def __len__(self):
        return len(self.table)


def build_embedding_lookup(table, precision: int = 6) -> EmbeddingLookup:
    q = _quantize(table, precision)
    keys = {}
    for token, row in enumerate(q):
        k = _key(row)
        if k in keys:
            raise ConfigurationError(
                f"tokens {keys[k]} and {token} collide at {precision} decimal digits"
            )
        keys[k] = token
    return EmbeddingLookup(keys, precision)


def reconstruct_tokens(candidate, lookup: EmbeddingLookup, seq_len: int, dim: int) -> list[int]:
    """Token ids for an extracted embedding sequence; unknown positions give SENTINEL."""
    x = candidate.x_hat if isinstance(candidate, ExtractionCandidate) else candidate
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != seq_len * dim:
        raise DimensionError(f"candidate has {x.size} features, expected {seq_len}x{dim}")
    if not np.all(np.isfinite(x)):
        return [SENTINEL] * seq_len
    return [lookup.lookup(v) for v in x.reshape(seq_len, dim)]
