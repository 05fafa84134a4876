import csv
import json

import pytest

from trapleak.cli import build_parser, main, parse_seeds, resolve_config
from trapleak.defense import DefenseConfig
from trapleak.experiments import ExperimentConfig, run_trial
from trapleak.fl import RoundConfig
from trapleak.initializers import TrapConfig

SMALL = {"dataset": "synthetic-tabular", "image_shape": [1, 6, 6], "synthetic_n": 300,
         "width_mult": 0.01, "neurons": 60}


def _cfg_file(tmp_path, extra=None):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **(extra or {})}))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip():
    cfg = ExperimentConfig(command="sweep-bn", trap=TrapConfig(s=0.9, seed=3),
                           round=RoundConfig(B=20, k=2), defense=DefenseConfig(clip_norm=1.0),
                           seeds=[4, 5], neuron_values=[100])
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"nonsense": 1})


def test_parse_seeds():
    assert parse_seeds("0-3,7") == [0, 1, 2, 3, 7]
    assert parse_seeds("5") == [5]


def test_flags_override_config(tmp_path):
    args = build_parser().parse_args(["active", "--config", _cfg_file(tmp_path, {"neurons": 10}),
                                      "--neurons", "33", "--s", "0.9", "--batch", "7",
                                      "--seed", "1-2", "--seed", "9", "--k", "3"])
    cfg = resolve_config(args)
    assert cfg.neurons == 33 and cfg.trap.s == 0.9 and cfg.round.B == 7 and cfg.round.k == 3
    assert cfg.seeds == [1, 2, 9] and cfg.dataset == "synthetic-tabular"


def test_dump_config(capsys):
    assert main(["text", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["arch"] == "text" and cfg["trap"]["s"] == 0.99


def test_active_writes_outputs_and_is_deterministic(tmp_path):
    cfg = _cfg_file(tmp_path)
    for name in ("a", "b"):
        assert main(["active", "--config", cfg, "--seed", "0-1", "--batch", "10",
                     "--out", str(tmp_path / name), "--plot"]) == 0
    a, b = _rows(tmp_path / "a" / "active.csv"), _rows(tmp_path / "b" / "active.csv")
    assert [r["seed"] for r in a] == ["0", "1"]
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wallclock_ms"} for r in rows]
    assert strip(a) == strip(b)
    out = tmp_path / "a"
    assert (out / "seeds.txt").read_text().split() == ["0", "1"]
    assert json.loads((out / "config.json").read_text())["seeds"] == [0, 1]
    assert (out / "active_summary.csv").exists() and (out / "active.png").exists()
    header = (out / "active.csv").read_text().splitlines()[0].split(",")
    assert header[:11] == ["seed", "dataset", "s", "sigma", "B", "N", "k", "A", "P", "R",
                           "wallclock_ms"]


def test_report_rerenders_figures(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["sweep-s", "--config", _cfg_file(tmp_path), "--seed", "0", "--batch", "10",
                 "--s-values", "0.5,0.9", "--out", str(out)]) == 0
    assert not (out / "sweep-s.png").exists()
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert (out / "sweep-s.png").exists()
    assert "sweep-s.png" in capsys.readouterr().out


def test_passive_schemes_and_sweeps(tmp_path):
    cfg = _cfg_file(tmp_path)
    assert main(["passive", "--config", cfg, "--seed", "0", "--batch", "10",
                 "--schemes", "gaussian:0.5,xavier_uniform", "--out", str(tmp_path / "p")]) == 0
    rows = _rows(tmp_path / "p" / "passive_summary.csv")
    assert [r["init"] for r in rows] == ["gaussian", "xavier_uniform"]
    assert main(["sweep-bn", "--config", cfg, "--seed", "0", "--neuron-values", "20,40",
                 "--batch-values", "5,10", "--out", str(tmp_path / "bn")]) == 0
    assert len(_rows(tmp_path / "bn" / "sweep-bn_summary.csv")) == 4
    assert main(["averaging", "--config", cfg, "--seed", "0", "--batch", "10",
                 "--k-values", "1,3", "--out", str(tmp_path / "k")]) == 0
    assert [r["k"] for r in _rows(tmp_path / "k" / "averaging.csv")] == ["1", "3"]


def test_averaging_k1_equals_active(tmp_path):
    cfg = ExperimentConfig.from_dict({**SMALL, "round": {"B": 10, "k": 1}})
    a = run_trial(cfg, 3)
    b = run_trial(cfg, 3, k=1)
    assert {k: v for k, v in a.row.items() if k != "wallclock_ms"} == \
        {k: v for k, v in b.row.items() if k != "wallclock_ms"}


def test_cnn_with_grids(tmp_path):
    extra = {"dataset": "synthetic-image", "arch": "cnn", "image_shape": [3, 8, 8],
             "cnn_filters": [4, 4], "neurons": 100}
    assert main(["active", "--config", _cfg_file(tmp_path, extra), "--seed", "0", "--batch", "5",
                 "--s", "0.95", "--grids", "--out", str(tmp_path / "c")]) == 0
    grids = sorted(p.name for p in (tmp_path / "c" / "grids").iterdir())
    assert grids == ["active_s0.95_B5_N100_k1_c0.pgm", "active_s0.95_B5_N100_k1_c1.pgm",
                     "active_s0.95_B5_N100_k1_c2.pgm"]


def test_defend_conditions(tmp_path):
    assert main(["defend", "--config", _cfg_file(tmp_path), "--seed", "0", "--batch", "8",
                 "--out", str(tmp_path / "d")]) == 0
    rows = {r["condition"]: r for r in _rows(tmp_path / "d" / "defend.csv")}
    assert {"none", "clip1", "noise1", "prune0.8", "dpsgd-user", "dpsgd-malicious"} <= set(rows)
    for c in ("clip0.25", "clip4", "dpsgd-malicious"):
        assert rows[c]["R"] == rows["none"]["R"]


def test_text_and_dlg(tmp_path):
    text = _cfg_file(tmp_path, {"vocab": 40, "seq_len": 6, "embed_dim": 4, "neurons": 50,
                                "batch_values": [5], "dataset": "synthetic-tokens"})
    assert main(["text", "--config", text, "--seed", "0", "--out", str(tmp_path / "t")]) == 0
    rows = _rows(tmp_path / "t" / "text.csv")
    assert [r["condition"] for r in rows] == ["active-B5", "passive-B5"]
    assert all("token_R" in r for r in rows)
    dlg = _cfg_file(tmp_path, {"dlg_targets": 2, "dlg_iters": 3})
    assert main(["dlg", "--config", dlg, "--seed", "0", "--out", str(tmp_path / "g"),
                 "--plot"]) == 0
    summary = _rows(tmp_path / "g" / "dlg_summary.csv")[0]
    assert float(summary["analytic_error_max"]) <= 1e-6
    assert (tmp_path / "g" / "dlg_loss.png").exists()


@pytest.mark.parametrize("argv", [
    ["active", "--batch", "0"],
    ["active", "--s", "1.5"],
    ["active", "--config", "/nonexistent.json"],
])
def test_errors_exit_nonzero_with_json_line(tmp_path, capsys, argv):
    assert main(argv + ["--out", str(tmp_path / "err")]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(payload) == {"error", "message"}
