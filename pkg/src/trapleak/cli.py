"""Command-line driver: one subcommand per experiment, CSV metrics under --out.

Every run writes ``config.json`` (with the seed set), ``<command>.csv`` with
one row per seed and grid point, and ``<command>_summary.csv`` with the
seed-averaged means. ``--plot`` renders PNG figures next to the CSVs;
``report`` re-renders them from an existing output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .attack import extract_candidates, match_candidates
from .architectures import small_dense
from .data import METRIC_FIELDS, gen_synthetic, write_metrics, write_reconstruction_grid
from .defense import DefenseConfig
from .dlg import dlg_reconstruct
from .experiments import ExperimentConfig, load_dataset, run_trial, seed_streams
from .initializers import init_random
from .nn import gradients

COMMANDS = ("passive", "active", "sweep-s", "sweep-bn", "averaging", "defend", "dlg", "text")
SUMMARY_KEYS = ("A", "P", "R", "P_active", "match_error_mean", "token_R")

# Per-command starting points; --config and flags override them.
PRESETS = {
    "text": {"dataset": "synthetic-tokens", "arch": "text", "trap": {"s": 0.99},
             "batch_values": [20, 200], "synthetic_n": 1000},
    "dlg": {"dataset": "synthetic-tabular", "image_shape": [1, 8, 8], "seeds": [0]},
}


class CliError(Exception):
    pass


def parse_seeds(text: str) -> list[int]:
    """``"0-9"``, ``"1,4,7"`` or mixtures of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep and lo:
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise CliError(f"empty seed list {text!r}")
    return seeds


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override it")
    common.add_argument("--seed", action="append", help="seed list, e.g. 0-9 or 1,2,3 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--s", type=float, help="trap scaling factor")
    common.add_argument("--sigma", type=float, help="trap / init standard deviation")
    common.add_argument("--batch", type=int, help="mini-batch size B")
    common.add_argument("--neurons", type=int, help="width N of the attacked dense layer")
    common.add_argument("--k", type=int, help="mini-batches averaged per update")
    common.add_argument("--dataset", choices=["mnist", "synthetic-image", "synthetic-tokens",
                                              "synthetic-tabular"])
    common.add_argument("--mnist-dir", help="directory with MNIST IDX files (default: bundled subset)")
    common.add_argument("--arch", choices=["fc", "cnn", "text"])
    common.add_argument("--width-mult", type=float, help="scale hidden widths")
    common.add_argument("--init", help="benign init scheme, e.g. xavier_uniform or gaussian:0.5")
    common.add_argument("--s-values", type=_floats, help="comma list for sweep-s")
    common.add_argument("--batch-values", type=_ints, help="comma list of B for sweeps")
    common.add_argument("--neuron-values", type=_ints, help="comma list of N for sweep-bn")
    common.add_argument("--k-values", type=_ints, help="comma list for averaging")
    common.add_argument("--schemes", type=lambda t: [v for v in t.split(",") if v],
                        help="comma list of init schemes for passive")
    common.add_argument("--grids", action="store_true", help="write PGM reconstruction grids")
    common.add_argument("--plot", action="store_true", help="render PNG figures next to the CSVs")
    common.add_argument("--dump-config", action="store_true",
                        help="print the resolved config as JSON and exit")

    p = argparse.ArgumentParser(prog="trapleak", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "passive": "benign random initializations (honest-but-curious server)",
        "active": "trap-weights attack at one scaling factor",
        "sweep-s": "trap-weights attack over a grid of scaling factors",
        "sweep-bn": "grid over attacked-layer width N and batch size B",
        "averaging": "updates averaged over k mini-batches",
        "defend": "clipping, noise, pruning and DPSGD against the attack",
        "dlg": "analytic extraction vs. gradient-matching optimization",
        "text": "token model with an embedding layer",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    rep = sub.add_parser("report", help="render figures from an existing output directory")
    rep.add_argument("out", help="output directory of an earlier run")
    return p


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def resolve_config(args) -> ExperimentConfig:
    d = ExperimentConfig(command=args.command).to_dict()
    d = _merge(d, PRESETS.get(args.command, {}))
    if args.config:
        try:
            d = _merge(d, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    d["command"] = args.command
    flat = {"out": args.out, "dataset": args.dataset, "mnist_dir": args.mnist_dir,
            "arch": args.arch, "width_mult": args.width_mult, "neurons": args.neurons,
            "init": args.init, "s_values": args.s_values, "batch_values": args.batch_values,
            "neuron_values": args.neuron_values, "k_values": args.k_values,
            "schemes": args.schemes}
    d.update({k: v for k, v in flat.items() if v is not None})
    if args.s is not None:
        d["trap"]["s"] = args.s
    if args.sigma is not None:
        d["trap"]["sigma"] = args.sigma
    if args.batch is not None:
        d["round"]["B"] = args.batch
    if args.k is not None:
        d["round"]["k"] = args.k
    if args.seed:
        d["seeds"] = [s for text in args.seed for s in parse_seeds(text)]
    d["grids"] = d.get("grids") or args.grids
    d["plot"] = d.get("plot") or args.plot
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _summarize(rows, group_keys):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    out = []
    for key, members in groups.items():
        s = dict(zip(group_keys, key))
        s["n_seeds"] = len(members)
        for m in SUMMARY_KEYS:
            vals = [r[m] for r in members if r.get(m) not in ("", None)]
            if vals:
                s[m] = float(np.mean(vals))
                if m in ("A", "P", "R"):
                    s[m + "_std"] = float(np.std(vals))
        s["wallclock_ms"] = float(np.mean([r["wallclock_ms"] for r in members]))
        out.append(s)
    return out


def _grid(trial, data_shape, path, limit=30):
    """Exact reconstructions placed at their batch slot; unrecovered slots stay gray."""
    path.parent.mkdir(parents=True, exist_ok=True)
    recs = [None] * min(limit, len(trial.truth))
    for c, j, e in zip(trial.candidates, trial.nearest, trial.rel_error):
        if j < len(recs) and e <= 1e-6 and recs[j] is None:
            recs[j] = np.clip(np.asarray(c.x_hat).reshape(data_shape), 0.0, 1.0)
    return write_reconstruction_grid(recs, path, tile_shape=data_shape)


def _trials(cfg, out, grid_points, group_keys, **fixed):
    """Run every (grid point, seed) pair; grid points are dicts of run_trial kwargs."""
    rows = []
    data = load_dataset(cfg)
    for point in grid_points:
        for seed in cfg.seeds:
            kwargs = {**fixed, **point}
            label = kwargs.pop("label", None)
            trial = run_trial(cfg, seed, data=data, **kwargs)
            row = dict(trial.row)
            if label is not None:
                row["condition"] = label
            rows.append(row)
            if cfg.grids and seed == cfg.seeds[0] and data.kind == "image":
                tag = "_".join(f"{k}{row[k]}" for k in group_keys if k != "condition")
                tag = label if label is not None else tag
                _grid(trial, data.shape, out / "grids" / f"{cfg.command}_{tag}.pgm")
            del trial  # wide models hold ~1 GB per trial
    return rows, _summarize(rows, group_keys)


def cmd_passive(cfg, out):
    points = [{"scheme": s, "active": False} for s in cfg.schemes]
    return _trials(cfg, out, points, ["init", "sigma", "B", "N"])


def cmd_active(cfg, out):
    return _trials(cfg, out, [{}], ["s", "B", "N", "k"])


def cmd_sweep_s(cfg, out):
    return _trials(cfg, out, [{"s": s} for s in cfg.s_values], ["s", "B", "N"])


def cmd_sweep_bn(cfg, out):
    points = [{"N": n, "B": b} for n in cfg.neuron_values for b in cfg.batch_values]
    return _trials(cfg, out, points, ["N", "B"])


def cmd_averaging(cfg, out):
    return _trials(cfg, out, [{"k": k} for k in cfg.k_values], ["k", "B", "N"])


def defense_conditions(cfg):
    """(label, DefenseConfig) pairs covering clip-only, noise-only, pruning and DPSGD."""
    d = cfg.defense
    conds = [("none", DefenseConfig())]
    conds += [(f"clip{c:g}", DefenseConfig(clip_norm=c)) for c in cfg.clip_norms]
    conds += [(f"noise{s:g}", DefenseConfig(noise_sigma=s)) for s in cfg.noise_sigmas]
    conds += [(f"prune{f:g}", DefenseConfig(prune_fraction=f)) for f in cfg.prune_fractions]
    c = d.clip_norm or 1.0
    sigma = d.noise_sigma or 1.0
    conds.append(("dpsgd-user", DefenseConfig(clip_norm=c, noise_sigma=sigma, noise_site="user",
                                              dpsgd=True)))
    conds.append(("dpsgd-malicious", DefenseConfig(clip_norm=c, noise_sigma=sigma,
                                                   noise_site="server", dpsgd=True,
                                                   malicious_server=True)))
    return conds


def cmd_defend(cfg, out):
    points = [{"defense": dc, "label": label} for label, dc in defense_conditions(cfg)]
    return _trials(cfg, out, points, ["condition"])


def cmd_text(cfg, out):
    points = []
    for b in cfg.batch_values:
        points.append({"B": b, "label": f"active-B{b}"})
        points.append({"B": b, "active": False, "scheme": cfg.init, "label": f"passive-B{b}"})
    return _trials(cfg, out, points, ["condition", "B", "N"])


def dlg_compare(cfg, seed):
    """Analytic and optimization reconstructions of the same B=1 gradients."""
    n_in = int(np.prod(cfg.image_shape))
    init_rng, data_rng, dlg_rng = seed_streams(seed)
    model = small_dense(n_in, cfg.dlg_hidden, 10)
    init_random(model, "xavier_uniform", init_rng)
    data = gen_synthetic("tabular", cfg.dlg_targets, (n_in,), classes=10, seed=seed)
    rows, traces = [], []
    for t in range(cfg.dlg_targets):
        x, y = data.features[t:t + 1], data.labels[t:t + 1]
        target = gradients(model, x, y)
        t0 = time.perf_counter()
        cands = extract_candidates(target[0]["W"], target[0]["b"])
        t_analytic = time.perf_counter() - t0
        _, rel = match_candidates(cands, x)
        analytic = float(rel.max()) if len(rel) else float("inf")
        t0 = time.perf_counter()
        best, _ = dlg_reconstruct(model, target, (n_in,), iters=cfg.dlg_iters,
                                  alpha=cfg.dlg_alpha, restarts=cfg.dlg_restarts, rng=dlg_rng)
        t_dlg = time.perf_counter() - t0
        err = float(np.linalg.norm(best.x_hat - x[0]) / np.linalg.norm(x[0]))
        rows.append({"seed": seed, "target": t, "active_rows": len(cands),
                     "analytic_error": analytic, "dlg_error": err if np.isfinite(err) else "inf",
                     "dlg_iters": best.iterations, "dlg_final_loss": best.final_loss,
                     "dlg_diverged": int(best.diverged),
                     "analytic_ms": t_analytic * 1e3, "dlg_ms": t_dlg * 1e3,
                     "wallclock_ms": (t_analytic + t_dlg) * 1e3})
        traces.append((t, best.losses))
    return rows, traces


def cmd_dlg(cfg, out):
    rows, traces = [], []
    for seed in cfg.seeds:
        r, tr = dlg_compare(cfg, seed)
        rows += r
        traces += tr
    errs = np.array([float(r["dlg_error"]) for r in rows])
    summary = [{
        "targets": len(rows),
        "analytic_error": float(np.mean([r["analytic_error"] for r in rows])),
        "analytic_error_max": float(np.max([r["analytic_error"] for r in rows])),
        "dlg_error": float(np.mean(errs)),
        "dlg_worse": int(sum(float(r["dlg_error"]) > r["analytic_error"] for r in rows)),
        "analytic_ms": float(np.mean([r["analytic_ms"] for r in rows])),
        "dlg_ms": float(np.mean([r["dlg_ms"] for r in rows])),
        "speedup": float(np.sum([r["dlg_ms"] for r in rows])
                         / max(np.sum([r["analytic_ms"] for r in rows]), 1e-9)),
    }]
    if cfg.plot:
        from .report import plot_loss_traces
        plot_loss_traces(traces[:8], out / "dlg_loss.png", title="gradient matching")
    return rows, summary


HANDLERS = {
    "passive": cmd_passive, "active": cmd_active, "sweep-s": cmd_sweep_s,
    "sweep-bn": cmd_sweep_bn, "averaging": cmd_averaging, "defend": cmd_defend,
    "dlg": cmd_dlg, "text": cmd_text,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute ``cfg.command`` and write all outputs; returns the written paths."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    (out / "seeds.txt").write_text(" ".join(map(str, cfg.seeds)) + "\n")
    rows, summary = HANDLERS[cfg.command](cfg, out)
    fields = METRIC_FIELDS if "A" in rows[0] else list(rows[0])
    paths = {"rows": write_metrics(rows, out / f"{cfg.command}.csv", fields=fields),
             "summary": write_metrics(summary, out / f"{cfg.command}_summary.csv",
                                        fields=list(summary[0]))}
    if cfg.plot:
        from .report import render
        paths["figures"] = render(cfg.command, out)
    return {"rows": rows, "summary": summary, "paths": paths}


def _print_summary(summary):
    if not summary:
        return
    keys = list(summary[0])
    print("\t".join(keys))
    for s in summary:
        print("\t".join(f"{s[k]:.4g}" if isinstance(s.get(k), float) else str(s.get(k, ""))
                        for k in keys))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            from .report import render
            out = Path(args.out)
            if not out.is_dir():
                raise CliError(f"no such output directory: {out}")
            cfg = json.loads((out / "config.json").read_text())
            figs = render(cfg["command"], out)
            for f in figs:
                print(f)
            return 0
        cfg = resolve_config(args)
        if args.dump_config:
            print(cfg.dumps())
            return 0
        result = run(cfg)
        _print_summary(result["summary"])
        return 0
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # one machine-readable line, then a nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
