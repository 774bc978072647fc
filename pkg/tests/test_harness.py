import json

import numpy as np
import pytest

from fedleak import cli
from fedleak import harness as Hn
from fedleak.errors import FedLeakError, UndefinedCorrelationError


def syn_config(tmp_path=None, **kw):
    d = {"dataset": "synthetic", "data": {"n": 60, "d": 4, "n_classes": 3},
         "fed": {"N": 2, "T": 5}, "attack_every": 1,
         "attacks": [{"kind": "dlg", "restarts": 3, "I": 40}],
         "unroll": {"H": 4, "epochs": 5, "max_trajectories": 20}, "lipschitz_pairs": 200,
         "output_dir": str(tmp_path or "out")}
    d.update(kw)
    return d


@pytest.fixture(scope="module")
def syn_cells():
    cfg = Hn.ExperimentConfig.from_dict(syn_config())
    return cfg, Hn.run_experiment(cfg)


# ---------------------------------------------------------------- pearson


def test_pearson_examples():
    a = np.array([0.3, 1.0, 2.5, 4.0])
    assert Hn.metric_pearson(a, 2 * a + 3) == pytest.approx(1.0)
    assert Hn.metric_pearson(a, -a) == pytest.approx(-1.0)
    assert Hn.metric_pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_pearson_zero_variance_and_shape():
    with pytest.raises(UndefinedCorrelationError):
        Hn.metric_pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        Hn.metric_pearson([1.0], [2.0])
    with pytest.raises(ValueError):
        Hn.metric_pearson([1, 2], [1, 2, 3])


def test_pearson_matches_numpy(rng):
    for _ in range(20):
        a, b = rng.normal(size=(2, 9))
        assert Hn.metric_pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = Hn.ExperimentConfig()
    assert cfg.fed == {"E": 2, "T": 100, "N": 10}
    batch = Hn.ExperimentConfig(dataset="cifar10", batch_size=20)
    assert batch.fed["N"] == 5
    assert Hn.ExperimentConfig(batch_size=20).fed["N"] == 15


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"sweep": {"axis": "lr", "values": [1]}},
    {"sweep": {"axis": "E", "values": []}},
    {"fed": {"E": "2x"}},
    {"fed": {"N": 2, "K": 3}},
    {"attacks": [{"kind": "nope"}]},
    {"batch_size": 0},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        Hn.ExperimentConfig.from_dict(syn_config(**bad))


def test_with_value_sets_each_axis():
    cfg = Hn.ExperimentConfig.from_dict(syn_config(sweep={"axis": "E", "values": [1, 2]}))
    assert cfg.with_value("E", 4).fed["E"] == 4
    assert cfg.with_value("E", 4).sweep is None
    assert cfg.with_value("batch_size", 3).batch_size == 3
    assert cfg.with_value("classes_per_client", 2).partition == {"mode": "classes_per_client", "classes": 2}
    assert cfg.with_value("init_std", 2.0).attacks[0]["init_std"] == 2.0
    assert cfg.fed["E"] == 2  # original untouched


def test_seed_env_override(monkeypatch):
    cfg = Hn.ExperimentConfig.from_dict(syn_config(seed=3))
    assert Hn._seed(cfg) == 3
    monkeypatch.setenv("FEDLEAK_SEED", "17")
    assert Hn._seed(cfg) == 17


def test_pick_victims_batches(mnist):
    from fedleak import data as D
    part = D.partition(mnist, 5, "iid", seed=0)
    vic = Hn.pick_victims(mnist, part, 2, 4, seed=0)
    assert len(vic) == 10
    for x, y, k in vic:
        assert x.shape == (4, mnist.d) and y.shape == (4,)
    again = Hn.pick_victims(mnist, part, 2, 4, seed=0)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(vic, again))


# ---------------------------------------------------------------- pipeline


def test_synthetic_run_rows(syn_cells):
    cfg, cells = syn_cells
    rows = cells[0].rows
    assert len(rows) == 5 and [r.t for r in rows] == [1, 2, 3, 4, 5]
    second = [r.bound_second for r in rows]
    assert np.all(np.diff(second) < 0)
    for r in rows:
        assert r.bound_total == pytest.approx(r.bound_first + r.bound_second, rel=1e-15)
        assert r.empirical_mse_std >= 0
        assert r.bound_total >= r.empirical_mse_mean


def test_emit_round_trip(syn_cells, tmp_path):
    cfg, cells = syn_cells
    out = Hn.emit(cells, tmp_path, cfg)
    raw = (out / "results.csv").read_bytes()
    assert b"\r\n" not in raw
    assert raw.decode("utf-8").splitlines()[0] == ",".join(Hn.ROW_FIELDS)
    assert Hn.read_rows(out / "results.csv") == cells[0].rows
    summary = json.loads((out / "summary.json").read_text())
    s = summary["default"]["attacks"]["dlg"]
    assert set(s) >= {"best_empirical_log10", "pearson", "L_R"}
    assert json.loads((out / "bounds" / "dlg.json").read_text())[0]["attack"] == "dlg"
    assert (out / "plotdata" / "default.csv").exists()


def test_emit_empty(tmp_path):
    out = Hn.emit([], tmp_path)
    assert (out / "results.csv").read_text() == ",".join(Hn.ROW_FIELDS) + "\n"
    assert json.loads((out / "summary.json").read_text()) == {"default": None}


def test_emit_unwritable(syn_cells, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        Hn.emit(syn_cells[1], blocker / "out")


def test_runs_byte_identical(tmp_path):
    cfg = Hn.ExperimentConfig.from_dict(syn_config())
    a = Hn.emit(Hn.run_experiment(cfg), tmp_path / "a", cfg)
    b = Hn.emit(Hn.run_experiment(cfg), tmp_path / "b", cfg)
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_stage_error_is_tagged():
    cfg = Hn.ExperimentConfig.from_dict(syn_config(partition={"mode": "classes_per_client", "classes": 5}))
    with pytest.raises(FedLeakError) as e:
        Hn.run_experiment(cfg)
    assert e.value.stage == "data"


def test_sweep_flushes_partial_results(tmp_path):
    d = syn_config(tmp_path, sweep={"axis": "classes_per_client", "values": [1, 9]})
    cfg = Hn.ExperimentConfig.from_dict(d)
    with pytest.raises(FedLeakError):
        Hn.run_experiment(cfg)
    rows = Hn.read_rows(tmp_path / "results.csv")
    assert rows and {r.sweep_value for r in rows} == {1}


def test_sweep_init_bound_constant():
    cfg = Hn.ExperimentConfig.from_dict(syn_config(fed={"N": 2, "T": 3}))
    rows = Hn.sweep_init(cfg, [0.5, 1.0], [1.0, 2.0])
    assert len(rows) == 8
    for kind in ("dlg", "idlg"):
        b = {r["bound_total"] for r in rows if r["attack"] == kind}
        assert len(b) == 1
    assert {r["t"] for r in rows} == {3}


# ---------------------------------------------------------------- cli


def test_apply_overrides():
    d = {"fed": {"E": 2}, "attacks": [{"kind": "dlg"}]}
    cli.apply_overrides(d, ["fed.E=4", "attacks.0.I=50", "model.kind=\"linconvnet\"", "output_dir=res"])
    assert d["fed"]["E"] == 4 and d["attacks"][0]["I"] == 50
    assert d["model"]["kind"] == "linconvnet" and d["output_dir"] == "res"
    with pytest.raises(cli.ConfigError):
        cli.apply_overrides(d, ["noequals"])


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(syn_config(tmp_path / "out")))
    return p


def test_cli_experiment(cfg_file, tmp_path, capsys):
    assert cli.main(["experiment", "--config", str(cfg_file)]) == 0
    rows = Hn.read_rows(tmp_path / "out" / "results.csv")
    assert len(rows) == 5


@pytest.mark.parametrize("argv", [
    ["experiment", "--config", "missing.json"],
    ["experiment", "--set", "bogus=1"],
    ["experiment", "--set", "fed.E=0.5x"],
    ["nonsense"],
])
def test_cli_config_errors(argv, cfg_file, capsys):
    if argv[0] == "experiment" and "--config" not in argv:
        argv = argv + ["--config", str(cfg_file)]
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_cli_stage_error(cfg_file, capsys):
    code = cli.main(["experiment", "--config", str(cfg_file), "--set", "partition.classes=5",
                     "--set", 'partition.mode="classes_per_client"'])
    assert code == cli.EXIT_STAGE
    assert "stage data" in capsys.readouterr().err


def test_cli_train_attack_bound(cfg_file, tmp_path, capsys):
    base = ["--config", str(cfg_file)]
    assert cli.main(["train", *base, "--out", str(tmp_path / "tr")]) == 0
    assert cli.main(["attack", *base, "--trace", str(tmp_path / "tr" / "trace"), "--kind", "idlg",
                     "--round", "2", "--iters", "8", "--restarts", "2", "--H", "4",
                     "--out", str(tmp_path / "att")]) == 0
    errs = json.loads((tmp_path / "att" / "errors_t2.json").read_text())
    assert np.array(errs["errors"]).shape == (2, 2)
    assert cli.main(["unroll", *base, "--trajectories", str(tmp_path / "att"), "--H", "4",
                     "--out", str(tmp_path / "net")]) == 0
    assert cli.main(["lipschitz", *base, "--net", str(tmp_path / "net"), "--pairs", "50",
                     "--out", str(tmp_path / "lip.json")]) == 0
    L_R = json.loads((tmp_path / "lip.json").read_text())["upper"]
    capsys.readouterr()
    assert cli.main(["bound", *base, "--trace", str(tmp_path / "tr" / "trace"),
                     "--constants", str(tmp_path / "tr" / "constants.json"), "--kind", "idlg",
                     "--L-R", str(L_R), "--first", "0.5"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["rounds"] == [1, 2, 3, 4, 5] and rep["L_R"] == pytest.approx(L_R)
    assert cli.main(["attack", *base, "--trace", str(tmp_path / "tr" / "trace"), "--kind", "dlg",
                     "--round", "99"]) == cli.EXIT_CONFIG


def test_cli_seed_flag_changes_output(cfg_file, tmp_path):
    assert cli.main(["experiment", "--config", str(cfg_file), "--output-dir", str(tmp_path / "a")]) == 0
    assert cli.main(["experiment", "--config", str(cfg_file), "--output-dir", str(tmp_path / "b"),
                     "--seed", "5"]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() != (tmp_path / "b" / "results.csv").read_bytes()


def test_cli_bound_needs_lipschitz_source(cfg_file, tmp_path, capsys):
    base = ["--config", str(cfg_file)]
    assert cli.main(["train", *base, "--out", str(tmp_path / "tr")]) == 0
    code = cli.main(["bound", *base, "--trace", str(tmp_path / "tr" / "trace"),
                     "--constants", str(tmp_path / "tr" / "constants.json"), "--kind", "dlg"])
    assert code == cli.EXIT_CONFIG
    assert "--L-R" in capsys.readouterr().err
