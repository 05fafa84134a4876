"""Experiment configuration and the single-trial attack pipeline shared by the CLI."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import architectures as arch
from .attack import (TOL_REL, build_embedding_lookup, extract_from_model, match_candidates,
                     metrics_from_matches, reconstruct_tokens)
from .data import Dataset, gen_synthetic, load_bundled_mnist, load_mnist_idx
from .defense import DefenseConfig, clip, dpsgd_round, noise, prune
from .fl import GradientUpdate, RoundConfig, TrapRecipe, UserNode, dispatch_model, run_round
from .initializers import TrapConfig, init_embedding_uniform, init_random

__all__ = ["ExperimentConfig", "Trial", "load_dataset", "build_model", "run_trial",
           "mean_rows", "seed_streams"]


@dataclass
class ExperimentConfig:
    command: str = "active"
    dataset: str = "mnist"
    mnist_dir: str | None = None
    arch: str = "fc"
    width_mult: float = 1.0
    neurons: int = 1000
    init: str = "xavier_uniform"
    init_sigma: float | None = None
    trap: TrapConfig = field(default_factory=TrapConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seeds: list = field(default_factory=lambda: list(range(10)))
    out: str = "out"
    # sweep grids; each subcommand reads the ones it needs
    s_values: list = field(default_factory=lambda: [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
    batch_values: list = field(default_factory=lambda: [20, 50, 100, 200])
    neuron_values: list = field(default_factory=lambda: [200, 500, 1000, 3000])
    k_values: list = field(default_factory=lambda: [1, 5, 10, 20])
    schemes: list = field(default_factory=lambda: [
        "xavier_normal", "xavier_uniform", "gaussian:0.01", "gaussian:0.1", "gaussian:0.5",
        "gaussian:1", "gaussian:2"])
    clip_norms: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    noise_sigmas: list = field(default_factory=lambda: [0.01, 0.1, 1.0])
    prune_fractions: list = field(default_factory=lambda: [0.5, 0.8, 0.9])
    # synthetic data and model shapes
    image_shape: list = field(default_factory=lambda: [3, 16, 16])
    cnn_filters: list = field(default_factory=lambda: list(arch.CNN_FILTERS))
    synthetic_n: int = 2000
    vocab: int = 1000
    seq_len: int = 250
    embed_dim: int = 250
    # optimization baseline
    dlg_targets: int = 20
    dlg_iters: int = 100
    dlg_alpha: float = 0.05
    dlg_restarts: int = 1
    dlg_hidden: int = 32
    grids: bool = False
    plot: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trap"] = self.trap.to_dict()
        d["round"] = dataclasses.asdict(self.round)
        d["defense"] = self.defense.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "trap" in d:
            d["trap"] = TrapConfig.from_dict(d["trap"])
        if "round" in d:
            d["round"] = RoundConfig(**d["round"])
        if "defense" in d:
            d["defense"] = DefenseConfig.from_dict(d["defense"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class Trial:
    row: dict
    candidates: list
    truth: np.ndarray
    nearest: np.ndarray
    rel_error: np.ndarray
    update: GradientUpdate | None = None


def seed_streams(seed: int, n: int = 3):
    """Independent generators for model init, data sampling and noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@lru_cache(maxsize=8)
def _cached_dataset(name, mnist_dir, image_shape, synthetic_n, vocab, seq_len):
    if name == "mnist":
        if mnist_dir:
            root = Path(mnist_dir)
            return load_mnist_idx(_find(root, "images"), _find(root, "labels"))
        return load_bundled_mnist()
    if name == "synthetic-image":
        return gen_synthetic("image", synthetic_n, image_shape, seed=12345)
    if name == "synthetic-tokens":
        return gen_synthetic("tokens", synthetic_n, (seq_len,), vocab=vocab, seed=12345)
    if name == "synthetic-tabular":
        return gen_synthetic("tabular", synthetic_n, (int(np.prod(image_shape)),), seed=12345)
    raise ValueError(f"unknown dataset {name!r}")


def _find(root: Path, kind: str) -> Path:
    pattern = "*-images-idx3-ubyte*" if kind == "images" else "*-labels-idx1-ubyte*"
    hits = sorted(root.glob(pattern))
    train = [h for h in hits if h.name.startswith("train")]
    if not hits:
        raise FileNotFoundError(f"no IDX {kind} file in {root}")
    return (train or hits)[0]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return _cached_dataset(cfg.dataset, cfg.mnist_dir, tuple(cfg.image_shape), cfg.synthetic_n,
                           cfg.vocab, cfg.seq_len)


def build_model(cfg: ExperimentConfig, data: Dataset, N: int | None = None):
    N = cfg.neurons if N is None else N
    if cfg.arch == "fc":
        return arch.fc_nn(int(np.prod(data.shape)), data.classes, N, width_mult=cfg.width_mult)
    if cfg.arch == "cnn":
        if data.kind != "image":
            raise ValueError("the cnn architecture needs image data")
        return arch.cnn(data.shape, data.classes, N, filters=cfg.cnn_filters,
                        width_mult=cfg.width_mult)
    if cfg.arch == "text":
        if data.kind != "tokens":
            raise ValueError("the text architecture needs token data")
        return arch.text_model(data.vocab, data.shape[0], cfg.embed_dim, N)
    raise ValueError(f"unknown architecture {cfg.arch!r}")


def parse_scheme(spec: str):
    """``"gaussian:0.5"`` -> ("gaussian", 0.5); other names carry no parameter."""
    name, _, param = spec.partition(":")
    return name, (float(param) if param else None)


def _user_features(cfg, data):
    if cfg.arch == "fc":
        return data.flat()
    return data.features


def run_trial(cfg: ExperimentConfig, seed: int, *, active: bool = True, s: float | None = None,
              B: int | None = None, N: int | None = None, k: int | None = None,
              scheme: str | None = None, defense: DefenseConfig | None = None,
              data: Dataset | None = None) -> Trial:
    """One user, one round: initialize, compute the upload, extract, score."""
    data = load_dataset(cfg) if data is None else data
    B = cfg.round.B if B is None else B
    k = cfg.round.k if k is None else k
    N = cfg.neurons if N is None else N
    defense = cfg.defense if defense is None else defense
    init_rng, round_rng, noise_rng = seed_streams(seed)

    model = build_model(cfg, data, N)
    if active or scheme is None:
        name, sigma = parse_scheme(cfg.init) if cfg.init_sigma is None else (cfg.init, cfg.init_sigma)
    else:
        name, sigma = parse_scheme(scheme)
    init_random(model, name, init_rng, sigma)
    if cfg.arch == "text":
        init_embedding_uniform(model.layers[0], init_rng)
        model.touch()

    target = arch.first_dense(model)
    trap = dataclasses.replace(cfg.trap, seed=seed, s=cfg.trap.s if s is None else s)
    recipe = None
    if active:
        recipe = TrapRecipe(trap, layer=target, conv_forwarding=cfg.arch == "cnn",
                            input_shape=data.shape)
    user = UserNode(0, _user_features(cfg, data), data.labels, seed=seed)

    seen = {}

    def observe(updates, models):
        seen["update"], seen["model"] = updates[0], models[user.id]

    if defense.dpsgd:
        sent = dispatch_model(model, recipe, user.id, round_rng)
        c = defense.clip_norm or 1.0
        uploads, _ = dpsgd_round([user], sent, c, defense.noise_sigma, B,
                                 noise_site=defense.noise_site,
                                 malicious_server=defense.malicious_server, rng=round_rng)
        update, sent_model = uploads[0], sent
    else:
        run_round(model, [user], RoundConfig(M=1, B=B, k=k, eta=0.0), round_rng,
                  hooks=[observe], recipe=recipe)
        update, sent_model = seen["update"], seen["model"]
        grads = update.grads
        if defense.clip_norm is not None:
            grads = clip(grads, defense.clip_norm)
        if defense.noise_sigma > 0:
            grads = noise(grads, defense.noise_sigma, noise_rng)
        if defense.prune_fraction > 0:
            grads = prune(grads, defense.prune_fraction)
        update = dataclasses.replace(update, grads=grads)

    t0 = time.perf_counter()
    plan = recipe.plan if recipe is not None else None
    if cfg.arch == "cnn" and plan is None:
        # passive CNN: only the flattened conv output is observable at the dense layer
        raise ValueError("passive extraction behind conv layers is not supported; use arch=fc")
    cands = extract_from_model(sent_model, update.grads, target, plan=plan,
                               input_shape=data.shape if cfg.arch != "text" else None)
    batch = data.features[update.indices]
    if cfg.arch == "text":
        truth = sent_model.layers[0].table[batch].reshape(len(batch), -1)
    else:
        truth = batch.reshape(len(batch), -1)
    nearest, rel = match_candidates(cands, truth)
    metrics = metrics_from_matches(nearest, rel, len(truth), N)
    elapsed_ms = (time.perf_counter() - t0) * 1e3

    row = {"seed": seed, "dataset": cfg.dataset, "s": trap.s if active else "",
           "sigma": trap.sigma if active else (sigma if sigma is not None else ""),
           "B": B, "N": N, "k": k, "A": metrics.A, "P": metrics.P, "R": metrics.R,
           "wallclock_ms": round(elapsed_ms, 3), "init": "trap" if active else name,
           "P_active": metrics.precision_active, "G0": metrics.G0, "B0": metrics.B0}
    finite = rel[np.isfinite(rel)]
    row["match_error_mean"] = float(finite.mean()) if finite.size else ""
    row["match_error_median"] = float(np.median(finite)) if finite.size else ""
    if cfg.arch == "text":
        row["token_R"] = _token_recall(sent_model, cands, batch, nearest, rel)
    return Trial(row, cands, truth, nearest, rel, update)


def _token_recall(model, cands, batch, nearest, rel):
    emb = model.layers[0]
    lookup = build_embedding_lookup(emb.table)
    recovered = set()
    seq_len = batch.shape[1]
    for c, j, e in zip(cands, nearest, rel):
        if e > TOL_REL:
            continue
        tokens = reconstruct_tokens(c, lookup, seq_len, emb.dim)
        if tokens == batch[j].tolist():
            recovered.add(int(j))
    return len(recovered) / len(batch)


def mean_rows(rows, keys=("A", "P", "R")) -> dict:
    out = {}
    for key in keys:
        vals = [r[key] for r in rows if r.get(key) not in ("", None)]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    return out
