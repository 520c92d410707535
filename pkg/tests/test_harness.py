import json
import math

import numpy as np
import pytest

from midefense import cli
from midefense.attacks import SensitivePrior, run_map_linreg
from midefense.core import derive_seed, synth_generate, train_test_split
from midefense.datasets import preset
from midefense.harness import (
    ConfigError,
    ExperimentConfig,
    GamesConfig,
    SweepError,
    TradeoffRecord,
    emit_plotdata,
    records_from_csv,
    records_to_csv,
    render_report,
    run_games,
    run_sweep,
)
from midefense.linreg import train_ridge
from midefense.metrics import mse


def linreg_config(tmp_path, **kw):
    obj = {
        "model": "linreg",
        "dataset": {"synth": "iwpc", "n": 400},
        "defenses": [{"name": "mid", "grid": [0.0]}],
        "repetitions": 1,
        "seed": 3,
        "out": str(tmp_path),
    }
    obj.update(kw)
    return ExperimentConfig.from_dict(obj)


def test_sweep_pipeline_identity(tmp_path):
    cfg = linreg_config(tmp_path)
    (rec,) = run_sweep(cfg)
    schema, scfg = preset("iwpc", 400)
    data = synth_generate(scfg, schema, 3)
    train, test = train_test_split(data, 0.2, derive_seed(3, 1))
    m = train_ridge(train)
    assert math.isclose(rec.utility_mean, mse(m.predict(test.rows), test.labels), rel_tol=1e-9)
    prior = SensitivePrior.from_dataset(train)
    assert rec.attack_test_mean == run_map_linreg(m, test, prior).accuracy
    assert rec.attack_train_mean == run_map_linreg(m, train, prior).accuracy
    assert rec.attack_gap_mean == rec.attack_train_mean - rec.attack_test_mean
    assert (tmp_path / "tradeoff.csv").exists()


def test_sweep_deterministic_bytes(tmp_path):
    obj = dict(dataset={"synth": "fivethirtyeight", "n": 300}, model="tree", repetitions=3,
               defenses=[{"name": "mid", "grid": [0, 1]}, {"name": "dp", "grid": [1, 10]}, {"name": "priority", "grid": [1]}])
    a = run_sweep(linreg_config(tmp_path / "a", **obj))
    b = run_sweep(linreg_config(tmp_path / "b", **obj), jobs=2)
    assert (tmp_path / "a" / "tradeoff.csv").read_bytes() == (tmp_path / "b" / "tradeoff.csv").read_bytes()
    assert len(a) == len(b) == 5 * 2


def test_sweep_records_roundtrip_and_stderr(tmp_path):
    records = run_sweep(linreg_config(tmp_path, repetitions=4, defenses=[{"name": "dp", "grid": [1.0]}]))
    text = (tmp_path / "tradeoff.csv").read_text()
    again = records_from_csv(text)
    for x, y in zip(again, records, strict=True):
        for f in TradeoffRecord.__dataclass_fields__:
            u, v = getattr(x, f), getattr(y, f)
            assert u == v or (isinstance(v, float) and math.isnan(u) and math.isnan(v)), f
    assert records_to_csv(again) == text
    r = records[0]
    assert r.repetitions == 4 and r.utility_stderr >= 0 and r.attack_test_stderr >= 0
    assert math.isnan(r.ece_mean)


def test_sweep_monotone_knob(tmp_path):
    recs = run_sweep(linreg_config(tmp_path, repetitions=20, dataset={"synth": "iwpc", "n": 2000},
                                   defenses=[{"name": "mid", "grid": [0, 0.1, 1, 10]}]), write=False)
    acc = [r.attack_test_mean for r in recs]
    se = [r.attack_test_stderr for r in recs]
    ok = sum(b <= a + 2 * max(sa, sb) for a, b, sa, sb in zip(acc, acc[1:], se, se[1:]))
    assert ok >= 3, (acc, se)


def test_nn_sweep_smoke(tmp_path):
    recs = run_sweep(linreg_config(
        tmp_path, model="nn", dataset={"synth": "blobs", "n": 300},
        defenses=[{"name": "mid", "grid": [0.01]}, {"name": "dp", "grid": [50.0]}],
        model_params={"epochs": 2, "inversion_epochs": 2},
    ))
    assert [r.attack for r in recs] == ["knowledge_alignment"] * 2
    assert all(0 <= r.ece_mean <= 1 for r in recs)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, model="svm")
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, defenses=[{"name": "priority"}])
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, defenses=[{"name": "mid", "grid": []}])
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, defenses=[{"name": "dp", "grid": [0]}])
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, repetitions=-1)
    with pytest.raises(ConfigError):
        linreg_config(tmp_path, attacks=["map_counts"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"defenses": []})


def test_sweep_failure_flushes_and_names_cell(tmp_path):
    cfg = linreg_config(tmp_path, defenses=[{"name": "mid", "grid": [0.0]}, {"name": "dp", "grid": [1.0]}],
                        model_params={"bound_y": "not-a-number"})
    with pytest.raises(SweepError, match="dp epsilon=1.0"):
        run_sweep(cfg)
    assert len(records_from_csv((tmp_path / "tradeoff.csv").read_text())) == 1


def fake_records():
    out = []
    for d, vals in (("mid", (1.0, 0.1, 0.0)), ("dp", (0.1, 1.0, 10.0))):
        for i, v in enumerate(vals):
            util = 0.1 * (i + 1) + (1 / 3 if d == "dp" else 0.0)
            out.append(TradeoffRecord("tree", d, "x", v, "map", "accuracy", util, 0.01, "accuracy",
                                      0.6 + i / 7, 0.01, 0.55 + i / 7, 0.01, 0.05, 0.002, 0.1, 0.01, 0.5, 0.01, 10))
    return out


def test_plotdata_shape_order_and_precision(tmp_path):
    recs = fake_records()
    (path,) = emit_plotdata(list(reversed(recs)), tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:4] == ["series", "param_name", "param_value", "utility"]
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 6 and {r[0] for r in rows} == {"mid", "dp"}
    for series in ("mid", "dp"):
        utils = [float(r[3]) for r in rows if r[0] == series]
        assert utils == sorted(utils)
    by_key = {(r.defense, r.param_value): r for r in recs}
    for r in rows:
        rec = by_key[(r[0], float(r[2]))]
        assert float(r[3]) == rec.utility_mean  # 17 significant digits round-trip exactly
        assert float(r[5]) == rec.attack_test_mean
    assert path.with_suffix(".columns.txt").read_text().startswith("series:")
    with pytest.raises(ValueError):
        emit_plotdata([], tmp_path)


def test_render_report_writes_png(tmp_path):
    paths = render_report(fake_records(), tmp_path)
    png = [p for p in paths if p.suffix == ".png"]
    assert len(png) == 1 and png[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_games_default_passes_and_misdeclared_fails():
    rep = run_games(GamesConfig(trials=20_000))
    assert rep["pass"]
    assert rep["rr_probe"]["within_5pct"]
    bad = run_games(GamesConfig(trials=20_000, epsilon=50.0, declared_epsilon=0.01, rr_probe=False, theorem1_joints=0))
    assert not bad["pass"]
    with pytest.raises(ConfigError):
        GamesConfig.from_dict({"trials": 0})
    with pytest.raises(ConfigError):
        GamesConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------------------
# CLI


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path / "data"
    assert cli.main(["synth", "--config", write(tmp_path / "s.json", {"preset": "fivethirtyeight", "n": 200}),
                     "--out", str(d), "--seed", "4"]) == 0
    train_cfg = {"model": "tree", "data": str(d / "data.csv"), "schema": str(d / "schema.json"),
                 "defense": {"name": "mid", "value": 0.1}}
    assert cli.main(["train", "--config", write(tmp_path / "t.json", train_cfg), "--out", str(tmp_path / "m")]) == 0
    atk = {**train_cfg, "model_file": str(tmp_path / "m" / "model.json"), "attack": "map_counts"}
    assert cli.main(["attack", "--config", write(tmp_path / "a.json", atk), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "attack.csv").read_text().startswith("instance_id,split,true_code")
    sweep = {"model": "linreg", "dataset": {"synth": "iwpc", "n": 300}, "repetitions": 2,
             "defenses": [{"name": "mid", "grid": [0, 1]}, {"name": "dp", "grid": [1]}]}
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", write(tmp_path / "w.json", sweep), "--out", str(out), "--jobs", "2"]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "plot_linreg_map.csv").exists() and (out / "plot_linreg_map.png").exists()


def test_cli_synth_deterministic(tmp_path):
    cfg = write(tmp_path / "s.json", {"preset": "iwpc", "n": 100})
    for name in ("a", "b"):
        assert cli.main(["synth", "--config", cfg, "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()


def test_cli_exit_codes(tmp_path):
    assert cli.main(["nonsense"]) == 1
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["sweep", "--config", str(tmp_path / "bad.json")]) == 1
    assert cli.main(["sweep", "--config", write(tmp_path / "m.json", {"model": "svm"})]) == 1
    assert cli.main(["games", "--config", write(tmp_path / "g.json", {"trials": 0})]) == 1
    assert cli.main(["synth", "--seed", "-3"]) == 1
    # a runtime failure (unreadable data file) is exit code 2
    cfg = {"model": "tree", "model_file": str(tmp_path / "nope.json"), "data": str(tmp_path / "nope.csv"),
           "schema": write(tmp_path / "schema.json", preset("iwpc", 10)[0].to_dict())}
    assert cli.main(["attack", "--config", write(tmp_path / "a.json", cfg)]) == 2


def test_cli_games_exit_codes(tmp_path):
    ok = {"trials": 5000, "theorem1_joints": 1}
    assert cli.main(["games", "--config", write(tmp_path / "ok.json", ok), "--out", str(tmp_path / "g")]) == 0
    report = json.loads((tmp_path / "g" / "games.json").read_text())
    assert report["pass"] is True
    bad = {"trials": 5000, "epsilon": 50.0, "declared_epsilon": 0.01, "theorem1_joints": 0, "rr_probe": False}
    assert cli.main(["games", "--config", write(tmp_path / "bad.json", bad), "--out", str(tmp_path / "b")]) == 3
