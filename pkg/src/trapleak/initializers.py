"""Weight initialization: benign random schemes, trap weights and input forwarding.

All randomness goes through :class:`numpy.random.Generator` (PCG64). Passing an
integer seed wherever an ``rng`` is accepted gives reproducible parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Conv2D, Dense, DimensionError, Embedding, Model, ReLU

__all__ = [
    "TrapConfig",
    "ForwardingPlan",
    "FCForwarding",
    "make_rng",
    "init_random",
    "trap_weights",
    "trap_weights_row",
    "init_trap_layer",
    "init_conv_forwarding",
    "init_fc_forwarding",
    "init_embedding_uniform",
    "forwarded_positions",
]

DEAD_BIAS = -0.01


def make_rng(seed_or_rng=None) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass(frozen=True)
class TrapConfig:
    mu: float = 0.0
    sigma: float = 0.5
    s: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.s < 1:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrapConfig":
        return cls(**d)


@dataclass
class FCForwarding:
    """Routing of one forwarding dense layer.

    ``carried[j]`` is the input index of the j-th carried feature, routed to
    neuron ``carriers[j]`` with positive weight ``scales[j]``.
    """

    layer: int
    carried: list[int]
    carriers: list[int]
    scales: list[float]

    def __post_init__(self):
        if len(set(self.carriers)) != len(self.carriers):
            raise ValueError("carrier neurons must be distinct")
        if not len(self.carried) == len(self.carriers) == len(self.scales):
            raise ValueError("carried, carriers and scales must have equal length")
        if any(not g > 0 for g in self.scales):
            raise ValueError("forwarding scales must be strictly positive")


@dataclass
class ForwardingPlan:
    """Where the model input travels on its way to the extraction layer.

    ``conv_carriers[l][c]`` is the output map of the l-th conv layer holding
    input channel ``c``. ``input_shape`` is the per-example input shape.
    """

    input_shape: tuple[int, ...]
    conv_layers: list[int] = field(default_factory=list)
    conv_carriers: list[list[int]] = field(default_factory=list)
    fc: list[FCForwarding] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        for carriers in self.conv_carriers:
            if len(set(carriers)) != len(carriers):
                raise ValueError("conv carrier indices must be distinct")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_layers": list(self.conv_layers),
            "conv_carriers": [list(c) for c in self.conv_carriers],
            "fc": [asdict(f) for f in self.fc],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForwardingPlan":
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_layers=list(d.get("conv_layers", [])),
            conv_carriers=[list(c) for c in d.get("conv_carriers", [])],
            fc=[FCForwarding(**f) for f in d.get("fc", [])],
        )


def _fans(shape):
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    raise DimensionError(f"no fan-in/out convention for shape {shape}")


def _draw(scheme, shape, rng, sigma):
    if scheme == "gaussian":
        return rng.normal(0.0, sigma, shape)
    fan_in, fan_out = _fans(shape)
    if scheme == "xavier_normal":
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)
    if scheme == "xavier_uniform":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_random(model: Model, scheme: str = "xavier_uniform", seed=None, sigma: float | None = None,
                layers=None) -> None:
    """Draw every weight i.i.d. from ``scheme``; biases are zeroed.

    ``scheme`` is ``gaussian`` (needs ``sigma``), ``xavier_normal`` or
    ``xavier_uniform``. ``layers`` restricts initialization to those indices.
    """
    if scheme == "gaussian" and (sigma is None or not sigma > 0):
        raise ValueError(f"gaussian init needs sigma > 0, got {sigma}")
    rng = make_rng(seed)
    for i, layer in enumerate(model.layers):
        if layers is not None and i not in layers:
            continue
        if isinstance(layer, Dense):
            layer.W[...] = _draw(scheme, layer.W.shape, rng, sigma)
            layer.b[...] = 0.0
        elif isinstance(layer, Conv2D):
            layer.filters[...] = _draw(scheme, layer.filters.shape, rng, sigma)
            layer.biases[...] = 0.0
        elif isinstance(layer, Embedding):
            # an embedding table is [vocab, dim]; treat it like a dense weight
            layer.table[...] = _draw(scheme, layer.table.shape, rng, sigma)
    model.touch()


def init_embedding_uniform(layer: Embedding, rng=None, low=0.0, high=1.0) -> None:
    layer.table[...] = make_rng(rng).uniform(low, high, layer.table.shape)


def trap_weights(n_rows: int, L: int, cfg: TrapConfig, rng=None, out=None) -> np.ndarray:
    """``n_rows`` independent trap rows of length ``L``.

    In every row a random half of the positions holds negative Gaussian
    magnitudes, and the other half holds a shuffled copy of those magnitudes
    scaled down by ``s``. For odd ``L`` the one leftover position gets an extra
    positive value ``s * |z|``. Rows are written into ``out`` when given.
    """
    if L < 2:
        raise ValueError(f"trap rows need length >= 2, got {L}")
    rng = make_rng(cfg.seed if rng is None else rng)
    W = np.empty((n_rows, L)) if out is None else out
    if W.shape != (n_rows, L):
        raise ValueError(f"out has shape {W.shape}, expected {(n_rows, L)}")
    half = L // 2
    # a random permutation per row decides which positions are negative
    index_type = np.int32 if L < 2**31 else np.int64
    positions = rng.permuted(np.broadcast_to(np.arange(L, dtype=index_type), (n_rows, L)), axis=1)
    vals = np.abs(rng.normal(cfg.mu, cfg.sigma, (n_rows, half)))
    vals *= -1.0
    np.put_along_axis(W, positions[:, :half], vals, axis=1)
    vals = rng.permuted(vals, axis=1, out=vals)
    vals *= -cfg.s
    np.put_along_axis(W, positions[:, half:2 * half], vals, axis=1)
    del vals
    if L % 2:
        extra = cfg.s * np.abs(rng.normal(cfg.mu, cfg.sigma, (n_rows, 1)))
        np.put_along_axis(W, positions[:, 2 * half:], extra, axis=1)
    return W


def trap_weights_row(L: int, cfg: TrapConfig, rng=None) -> np.ndarray:
    return trap_weights(1, L, cfg, rng)[0]


def init_trap_layer(layer, cfg: TrapConfig, rng=None) -> None:
    if not isinstance(layer, Dense):
        raise TypeError(f"trap weights need a dense layer, got {layer!r}")
    trap_weights(layer.n_out, layer.n_in, cfg, rng, out=layer.W)
    layer.b[...] = 0.0


def _conv_stack(model: Model):
    """Indices of the conv layers preceding the first dense layer."""
    first_dense = model.dense_indices()[0]
    return [i for i in range(first_dense) if isinstance(model.layers[i], Conv2D)]


def init_conv_forwarding(model: Model, plan: ForwardingPlan | None = None, rng=None,
                         sigma: float = 0.5) -> ForwardingPlan:
    """Make the conv stack copy its input unchanged into designated maps.

    Carrier filters are zero except for a centred 1 on the previous carrier
    map. Other filters stay random, except in the last conv layer where they
    are all-negative with a negative bias so that ReLU zeroes their maps for
    any nonnegative input. Returns the plan actually used.
    """
    rng = make_rng(rng)
    conv_idx = _conv_stack(model)
    if not conv_idx:
        raise ValueError("model has no convolutional layers before its first dense layer")
    first = model.layers[conv_idx[0]]
    n_channels = first.channels
    if plan is None or not plan.conv_carriers:
        input_shape = plan.input_shape if plan is not None else (n_channels,)
        carriers = [
            sorted(rng.choice(model.layers[i].n_filters, n_channels, replace=False).tolist())
            for i in conv_idx
        ]
        plan = ForwardingPlan(input_shape=input_shape, conv_layers=conv_idx,
                              conv_carriers=carriers)
    if len(plan.conv_carriers) != len(conv_idx):
        raise ValueError("plan must list carriers for every conv layer")
    plan.conv_layers = list(conv_idx)

    previous = list(range(n_channels))
    for pos, (i, carriers) in enumerate(zip(conv_idx, plan.conv_carriers)):
        conv = model.layers[i]
        if conv.kernel % 2 == 0:
            raise ValueError(f"layer {i}: forwarding needs an odd kernel, got {conv.kernel}")
        if conv.stride != 1 or conv.padding != "same":
            raise ValueError(f"layer {i}: forwarding needs stride 1 and same padding")
        if conv.n_filters < len(carriers) or len(carriers) != n_channels:
            raise ValueError(f"layer {i}: needs {n_channels} carrier filters, has {conv.n_filters}")
        if max(carriers) >= conv.n_filters:
            raise ValueError(f"layer {i}: carrier index out of range")
        nxt = i + 1
        if nxt >= len(model.layers) or not isinstance(model.layers[nxt], ReLU):
            raise ValueError(f"layer {i}: forwarding expects a ReLU after each conv layer")
        last = pos == len(conv_idx) - 1
        f, c, k, _ = conv.filters.shape
        if last:
            conv.filters[...] = -np.abs(rng.normal(0.0, sigma, conv.filters.shape))
            conv.biases[...] = DEAD_BIAS
        else:
            conv.filters[...] = _draw("xavier_uniform", conv.filters.shape, rng, None)
            conv.biases[...] = 0.0
        centre = k // 2
        for channel, filt in enumerate(carriers):
            conv.filters[filt] = 0.0
            conv.filters[filt, previous[channel], centre, centre] = 1.0
            conv.biases[filt] = 0.0
        previous = list(carriers)
    model.touch()
    return plan


def init_fc_forwarding(layer: Dense, carried=None, rng=None, scales=None, sigma: float = 0.5,
                       layer_index: int = -1) -> FCForwarding:
    """Route each carried input feature to its own random neuron.

    Feature ``carried[j]`` reaches neuron ``carriers[j]`` through one positive
    weight ``g_j``; other carried features contribute 0 to carrier neurons.
    Non-carrier neurons get all-negative weights and a negative bias, so they
    stay dead for nonnegative inputs. Returns the routing with the ``g_j``.
    """
    if not isinstance(layer, Dense):
        raise TypeError("FC forwarding needs a dense layer")
    rng = make_rng(rng)
    carried = list(range(layer.n_in)) if carried is None else [int(j) for j in carried]
    m = len(carried)
    if layer.n_out < m:
        raise ValueError(f"layer has {layer.n_out} neurons but {m} features must be carried")
    if scales is None:
        scales = rng.uniform(0.5, 2.0, m)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (m,) or np.any(scales <= 0):
        raise ValueError("scales must be one positive value per carried feature")
    carriers = rng.choice(layer.n_out, m, replace=False)

    W = -np.abs(rng.normal(0.0, sigma, layer.W.shape))
    b = np.full(layer.n_out, DEAD_BIAS)
    # inputs that are not carried are dead upstream; their weights are free
    free = np.setdiff1d(np.arange(layer.n_in), carried)
    W[np.ix_(carriers, free)] = rng.normal(0.0, sigma, (m, free.size))
    W[np.ix_(carriers, carried)] = 0.0
    W[carriers, carried] = scales
    b[carriers] = 0.0
    layer.W[...] = W
    layer.b[...] = b
    return FCForwarding(layer=layer_index, carried=list(carried), carriers=carriers.tolist(),
                        scales=scales.tolist())


def forwarded_positions(plan: ForwardingPlan, target_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Map each flattened input feature to its position at the extraction layer.

    Returns ``(positions, factors)``: feature ``j`` of the flattened input
    arrives at index ``positions[j]`` multiplied by ``factors[j]``.
    """
    n_features = int(np.prod(plan.input_shape))
    positions = np.arange(n_features)
    factors = np.ones(n_features)
    if plan.conv_carriers:
        c = plan.input_shape[0]
        hw = n_features // c
        maps = np.asarray(plan.conv_carriers[-1])
        channel = positions // hw
        positions = maps[channel] * hw + positions % hw
    for fc in plan.fc:
        lookup = {src: (dst, g) for src, dst, g in zip(fc.carried, fc.carriers, fc.scales)}
        try:
            moved = [lookup[int(p)] for p in positions]
        except KeyError as exc:
            raise ValueError(f"feature at position {exc.args[0]} is not carried by layer "
                             f"{fc.layer}") from None
        positions = np.array([d for d, _ in moved])
        factors = factors * np.array([g for _, g in moved])
    if positions.size and positions.max() >= target_in:
        raise ValueError("forwarded positions exceed the extraction layer's input width")
    return positions, factors
