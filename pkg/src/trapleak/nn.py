"""Minimal neural-network engine with hand-written backward rules.

Tensors are plain float64 numpy arrays. Image batches use NCHW layout, dense
batches are ``[B, features]`` and token batches are integer ``[B, seq_len]``.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "InputError",
    "StateError",
    "Dense",
    "Conv2D",
    "ReLU",
    "Flatten",
    "Embedding",
    "Model",
    "ForwardTrace",
    "ModelGradients",
    "forward",
    "loss",
    "loss_grad",
    "backward",
    "per_example_gradients",
    "iter_per_example_gradients",
    "sgd_step",
    "gradients",
]

_trace_ids = itertools.count()


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class InputError(ValueError):
    """Raised for invalid labels or other malformed inputs."""


class StateError(RuntimeError):
    """Raised when a forward trace no longer matches its model."""


class Layer:
    params: tuple[str, ...] = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache, per_example=False):
        """Return ``(dx, {param: grad})``; dx may be None for the input layer."""
        raise NotImplementedError

    def backward_input(self, dout, cache):
        """Gradient w.r.t. the layer input only, for layers whose parameters are frozen."""
        return self.backward(dout, cache)[0]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.params}


class Dense(Layer):
    params = ("W", "b")

    def __init__(self, W, b=None):
        self.W = np.array(W, dtype=np.float64)
        if self.W.ndim != 2:
            raise DimensionError(f"dense weight must be 2-D, got {self.W.shape}")
        self.b = np.zeros(self.W.shape[0]) if b is None else np.array(b, dtype=np.float64)
        if self.b.shape != (self.W.shape[0],):
            raise DimensionError(
                f"bias length {self.b.shape} does not match {self.W.shape[0]} rows"
            )

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "Dense":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense layer expects [B, {self.n_in}], got {x.shape}")
        return x @ self.W.T + self.b, x

    def backward(self, dout, cache, per_example=False):
        x = cache
        if per_example:
            grads = {"W": dout[:, :, None] * x[:, None, :], "b": dout.copy()}
        else:
            grads = {"W": dout.T @ x, "b": dout.sum(axis=0)}
        return dout @ self.W, grads

    def backward_input(self, dout, cache):
        return dout @ self.W

    def __repr__(self):
        return f"Dense(in={self.n_in}, out={self.n_out})"


class Conv2D(Layer):
    """2-D convolution over NCHW input (cross-correlation, like most frameworks).

    ``same`` padding yields ``ceil(H / stride)`` outputs per axis; when the
    total padding is odd the extra row/column goes to the bottom/right.
    """

    params = ("filters", "biases")

    def __init__(self, filters, biases=None, stride: int = 1, padding: str = "same"):
        self.filters = np.array(filters, dtype=np.float64)
        if self.filters.ndim != 4 or self.filters.shape[2] != self.filters.shape[3]:
            raise DimensionError(f"filters must be [f, c, k, k], got {self.filters.shape}")
        f = self.filters.shape[0]
        self.biases = np.zeros(f) if biases is None else np.array(biases, dtype=np.float64)
        if self.biases.shape != (f,):
            raise DimensionError("one bias per filter required")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        if stride < 1:
            raise ValueError("stride must be positive")
        self.stride = int(stride)
        self.padding = padding

    @classmethod
    def zeros(cls, n_filters, channels, kernel, stride=1, padding="same") -> "Conv2D":
        return cls(np.zeros((n_filters, channels, kernel, kernel)), None, stride, padding)

    @property
    def kernel(self) -> int:
        return self.filters.shape[2]

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def channels(self) -> int:
        return self.filters.shape[1]

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        k, s = self.kernel, self.stride
        out_h, out_w = -(-h // s), -(-w // s)
        ph = max((out_h - 1) * s + k - h, 0)
        pw = max((out_w - 1) * s + k - w, 0)
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)

    def output_hw(self, h, w):
        (pt, pb), (pl, pr) = self._pads(h, w)
        k, s = self.kernel, self.stride
        return (h + pt + pb - k) // s + 1, (w + pl + pr - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"conv layer expects [B, {self.channels}, H, W], got {x.shape}"
            )
        n, _, h, w = x.shape
        pads = self._pads(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), *pads))
        out_h, out_w = self.output_hw(h, w)
        k, s = self.kernel, self.stride
        out = np.zeros((n, self.n_filters, out_h, out_w))
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di : di + s * out_h : s, dj : dj + s * out_w : s]
                out += np.einsum("nchw,fc->nfhw", patch, self.filters[:, :, di, dj])
        out += self.biases[None, :, None, None]
        return out, (xp, x.shape, pads)

    def backward(self, dout, cache, per_example=False):
        xp, x_shape, pads = cache
        k, s = self.kernel, self.stride
        out_h, out_w = dout.shape[2:]
        dxp = np.zeros_like(xp)
        spec = "nfhw,nchw->nfc" if per_example else "nfhw,nchw->fc"
        dfilt = np.zeros((dout.shape[0],) * per_example + self.filters.shape)
        for di in range(k):
            for dj in range(k):
                window = (slice(None), slice(None),
                          slice(di, di + s * out_h, s), slice(dj, dj + s * out_w, s))
                dfilt[..., di, dj] = np.einsum(spec, dout, xp[window])
                dxp[window] += np.einsum("nfhw,fc->nchw", dout, self.filters[:, :, di, dj])
        dbias = dout.sum(axis=(2, 3)) if per_example else dout.sum(axis=(0, 2, 3))
        (pt, _), (pl, _) = pads
        h, w = x_shape[2:]
        dx = dxp[:, :, pt : pt + h, pl : pl + w]
        return dx, {"filters": dfilt, "biases": dbias}

    def __repr__(self):
        f, c, k, _ = self.filters.shape
        return f"Conv2D(f={f}, c={c}, k={k}, stride={self.stride}, padding={self.padding!r})"


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache, per_example=False):
        # subgradient at exactly zero is zero
        return dout * (cache > 0), {}

    def __repr__(self):
        return "ReLU()"


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, per_example=False):
        return dout.reshape(cache), {}

    def __repr__(self):
        return "Flatten()"


class Embedding(Layer):
    """Token lookup: integer ``[B, seq]`` -> ``[B, seq, dim]``."""

    params = ("table",)

    def __init__(self, table):
        self.table = np.array(table, dtype=np.float64)
        if self.table.ndim != 2:
            raise DimensionError("embedding table must be [vocab, dim]")

    @classmethod
    def zeros(cls, vocab: int, dim: int) -> "Embedding":
        return cls(np.zeros((vocab, dim)))

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def forward(self, x):
        tokens = np.asarray(x)
        if not np.issubdtype(tokens.dtype, np.integer):
            if not np.all(np.mod(tokens, 1) == 0):
                raise InputError("embedding input must be integer token ids")
            tokens = tokens.astype(np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"embedding expects [B, seq_len] token ids, got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise InputError(f"token id outside vocabulary of size {self.vocab}")
        return self.table[tokens], tokens

    def backward(self, dout, cache, per_example=False):
        tokens = cache
        if per_example:
            g = np.zeros((tokens.shape[0],) + self.table.shape)
            for n in range(tokens.shape[0]):
                np.add.at(g[n], tokens[n], dout[n])
        else:
            g = np.zeros_like(self.table)
            np.add.at(g, tokens.reshape(-1), dout.reshape(-1, self.dim))
        return None, {"table": g}

    def __repr__(self):
        return f"Embedding(vocab={self.vocab}, dim={self.dim})"


class Model:
    """Ordered layer stack; ``task`` is ``"multiclass"`` or ``"binary"``."""

    def __init__(self, layers: Sequence[Layer], task: str = "multiclass"):
        if task not in ("multiclass", "binary"):
            raise ValueError(f"unknown task {task!r}")
        self.layers = list(layers)
        self.task = task
        self.version = 0
        if not any(isinstance(layer, Dense) for layer in self.layers):
            raise ValueError("a model needs at least one dense layer")

    def touch(self) -> None:
        """Mark parameters as modified so older traces are rejected."""
        self.version += 1

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def dense_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]

    def parameters(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_arrays().items():
                yield i, name, arr

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())

    def zero_gradients(self) -> "ModelGradients":
        return ModelGradients(
            [{k: np.zeros_like(v) for k, v in layer.param_arrays().items()} for layer in self.layers]
        )

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Model([{inner}], task={self.task!r})"


@dataclass
class ForwardTrace:
    caches: list
    logits: np.ndarray
    batch_size: int
    model_id: int
    model_version: int
    trace_id: int = field(default_factory=lambda: next(_trace_ids))


@dataclass
class ModelGradients:
    """Per-layer gradient dicts, shape-matched to ``Model.layers`` parameters."""

    layers: list[dict[str, np.ndarray]]

    def __iter__(self):
        for i, grads in enumerate(self.layers):
            for name, g in grads.items():
                yield i, name, g

    def __getitem__(self, i: int) -> dict[str, np.ndarray]:
        return self.layers[i]

    def __len__(self) -> int:
        return len(self.layers)

    def map(self, fn) -> "ModelGradients":
        return ModelGradients([{k: fn(v) for k, v in g.items()} for g in self.layers])

    def copy(self) -> "ModelGradients":
        return self.map(np.array)

    def scale(self, factor: float) -> "ModelGradients":
        return self.map(lambda v: v * factor)

    def flat(self) -> np.ndarray:
        parts = [g.ravel() for _, _, g in self]
        return np.concatenate(parts) if parts else np.zeros(0)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for _, _, g in self)))

    def shapes(self) -> list[dict[str, tuple]]:
        return [{k: v.shape for k, v in g.items()} for g in self.layers]

    def check_compatible(self, other: "ModelGradients") -> None:
        if self.shapes() != other.shapes():
            raise DimensionError("gradient structures differ")

    def __add__(self, other: "ModelGradients") -> "ModelGradients":
        self.check_compatible(other)
        return ModelGradients(
            [{k: a[k] + b[k] for k in a} for a, b in zip(self.layers, other.layers)]
        )

    def __sub__(self, other: "ModelGradients") -> "ModelGradients":
        return self + other.scale(-1.0)

    @staticmethod
    def mean(items: Sequence["ModelGradients"]) -> "ModelGradients":
        if not items:
            raise ValueError("cannot average an empty list of gradients")
        total = items[0].copy()
        for g in items[1:]:
            total.check_compatible(g)
            for a, b in zip(total.layers, g.layers):
                for k in a:
                    a[k] += b[k]
        return total.scale(1.0 / len(items))


def forward(model: Model, batch) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(batch)
    if x.ndim < 1 or x.shape[0] < 1:
        raise DimensionError("batch must contain at least one example")
    if not isinstance(model.layers[0], Embedding):
        x = x.astype(np.float64, copy=False)
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    if model.task == "binary" and (x.ndim != 2 or x.shape[1] != 1):
        raise DimensionError(f"binary model must emit [B, 1] logits, got {x.shape}")
    trace = ForwardTrace(caches, x, x.shape[0], id(model), model.version)
    return x, trace


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _targets(logits, labels, task):
    """Labels as a target matrix: one-hot/soft rows (multiclass) or [B, 1] (binary)."""
    y = np.asarray(labels, dtype=np.float64)
    B = logits.shape[0]
    if task == "binary":
        y = y.reshape(-1, 1)
        if y.shape[0] != B:
            raise DimensionError("label count does not match batch size")
        if np.any((y < 0) | (y > 1)):
            raise InputError("binary labels must lie in [0, 1]")
        return y
    C = logits.shape[1]
    if y.ndim == 2:
        if y.shape != logits.shape:
            raise DimensionError(f"soft labels {y.shape} do not match logits {logits.shape}")
        return y
    if y.shape != (B,):
        raise DimensionError("label count does not match batch size")
    if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y >= C):
        raise InputError(f"labels must be integers in [0, {C})")
    onehot = np.zeros_like(logits)
    onehot[np.arange(B), y.astype(int)] = 1.0
    return onehot


def loss(logits, labels, task: str = "multiclass") -> float:
    """Mean cross-entropy; softmax for multiclass, sigmoid for binary."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _targets(logits, labels, task)
    if task == "binary":
        z = logits
        per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return float(per.mean())
    return float(-(y * _log_softmax(logits)).sum(axis=1).mean())


def loss_grad(logits, labels, task: str = "multiclass") -> np.ndarray:
    """Gradient of the *summed* per-example loss w.r.t. the logits."""
    y = _targets(logits, labels, task)
    if task == "binary":
        return 0.5 * (1.0 + np.tanh(0.5 * logits)) - y
    p = np.exp(_log_softmax(logits))
    return p * y.sum(axis=1, keepdims=True) - y


def _check_trace(model, trace):
    if trace.model_id != id(model) or trace.model_version != model.version:
        raise StateError("forward trace is stale or belongs to a different model")
    if len(trace.caches) != len(model.layers):
        raise StateError("trace does not match the model's layer count")


def _backprop(model, trace, dlogits, per_example, wrt=None):
    grads: list[dict] = [{} for _ in model.layers]
    stop = 0 if wrt is None else min(wrt, default=len(model.layers))
    d = dlogits
    for i in range(len(model.layers) - 1, stop - 1, -1):
        layer = model.layers[i]
        if wrt is not None and i not in wrt:
            d = layer.backward_input(d, trace.caches[i])
            continue
        d, grads[i] = layer.backward(d, trace.caches[i], per_example=per_example)
        if d is None and i > 0:
            raise DimensionError(f"layer {i} ({layer!r}) must be the first layer")
    return grads


def backward(model: Model, trace: ForwardTrace, labels, wrt=None) -> ModelGradients:
    """Batch-averaged gradients of the loss w.r.t. every parameter.

    ``wrt`` lists the layer indices whose parameters are wanted; the others are
    treated as frozen and get empty gradient dicts. Backpropagation stops at the
    lowest requested layer.
    """
    _check_trace(model, trace)
    dlogits = loss_grad(trace.logits, labels, model.task) / trace.batch_size
    wrt = None if wrt is None else set(wrt)
    return ModelGradients(_backprop(model, trace, dlogits, per_example=False, wrt=wrt))


def gradients(model: Model, batch, labels, wrt=None) -> ModelGradients:
    """Forward + backward in one call."""
    _, trace = forward(model, batch)
    return backward(model, trace, labels, wrt)


PER_EXAMPLE_BUDGET = 256 * 2**20  # bytes of per-example gradients held at once


def iter_per_example_gradients(model, batch, labels, chunk: int | None = None):
    """Yield one ModelGradients per batch row, processing ``chunk`` rows at a time.

    By default the chunk is sized so a chunk's gradients fit in
    ``PER_EXAMPLE_BUDGET`` bytes.
    """
    batch = np.asarray(batch)
    labels = np.asarray(labels)
    if labels.shape[0] != batch.shape[0]:
        raise DimensionError("label count does not match batch size")
    if chunk is None:
        n_params = sum(v.size for layer in model.layers for v in layer.param_arrays().values())
        chunk = int(np.clip(PER_EXAMPLE_BUDGET // max(8 * n_params, 1), 1, 64))
    for start in range(0, batch.shape[0], chunk):
        xb, yb = batch[start : start + chunk], labels[start : start + chunk]
        logits, trace = forward(model, xb)
        dlogits = loss_grad(logits, yb, model.task)
        per = _backprop(model, trace, dlogits, per_example=True)
        for n in range(xb.shape[0]):
            yield ModelGradients([{k: v[n] for k, v in g.items()} for g in per])


def per_example_gradients(model, batch, labels) -> list[ModelGradients]:
    return list(iter_per_example_gradients(model, batch, labels))


def sgd_step(model: Model, grads: ModelGradients, lr: float) -> None:
    """In-place ``param -= lr * grad`` for every parameter."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(model.layers):
        raise DimensionError("gradient/model layer count mismatch")
    for i, layer in enumerate(model.layers):
        params = layer.param_arrays()
        if set(params) != set(grads[i]):
            raise DimensionError(f"layer {i}: gradient keys {sorted(grads[i])} != {sorted(params)}")
        for name, arr in params.items():
            if arr.shape != grads[i][name].shape:
                raise DimensionError(f"layer {i} {name}: {grads[i][name].shape} != {arr.shape}")
    for i, layer in enumerate(model.layers):
        for name, arr in layer.param_arrays().items():
            arr -= lr * grads[i][name]
    model.touch()
