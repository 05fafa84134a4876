"""Model builders for the fully-connected, convolutional and text architectures.

Widths after the extraction layer scale with ``width_mult`` so the larger
architectures fit on a desk machine; the extraction width ``N`` never scales.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv2D, Dense, Embedding, Flatten, Model, ReLU

__all__ = ["fc_nn", "cnn", "text_model", "small_dense", "FC_WIDTHS", "CNN_FILTERS"]

FC_WIDTHS = (3000, 3000, 2000, 1000)
CNN_FILTERS = (128, 256, 512)


def _scaled(width, mult, floor=1):
    return max(floor, int(round(width * mult)))


def fc_nn(n_features: int, classes: int = 10, N: int = 1000, widths=FC_WIDTHS,
          width_mult: float = 1.0) -> Model:
    """Dense(N) then the hidden stack, ReLU after each, then a linear classifier."""
    sizes = [N] + [_scaled(w, width_mult) for w in widths]
    layers, fan_in = [], n_features
    for width in sizes:
        layers += [Dense.zeros(fan_in, width), ReLU()]
        fan_in = width
    layers.append(Dense.zeros(fan_in, classes))
    return Model(layers, task="multiclass")


def cnn(input_shape, classes: int = 10, N: int = 1000, filters=CNN_FILTERS,
        width_mult: float = 1.0, kernel: int = 3) -> Model:
    """Same-padded stride-1 conv stack, flatten, Dense(N), linear classifier."""
    c, h, w = input_shape
    layers, channels = [], c
    for f in filters:
        f = _scaled(f, width_mult, floor=c)
        layers += [Conv2D.zeros(f, channels, kernel), ReLU()]
        channels = f
    layers += [Flatten(), Dense.zeros(channels * h * w, N), ReLU(), Dense.zeros(N, classes)]
    return Model(layers, task="multiclass")


def text_model(vocab: int = 10000, seq_len: int = 250, dim: int = 250, N: int = 1000) -> Model:
    """Embedding, flattened into Dense(N), then a single binary logit."""
    return Model([Embedding.zeros(vocab, dim), Flatten(), Dense.zeros(seq_len * dim, N), ReLU(),
                  Dense.zeros(N, 1)], task="binary")


def small_dense(n_in: int, hidden: int, classes: int) -> Model:
    return Model([Dense.zeros(n_in, hidden), ReLU(), Dense.zeros(hidden, classes)])


def first_dense(model: Model) -> int:
    return model.dense_indices()[0]


def describe(model: Model) -> list[str]:
    return [repr(layer) for layer in model.layers]


def n_params(model: Model) -> int:
    return int(sum(np.size(a) for _, _, a in model.parameters()))
