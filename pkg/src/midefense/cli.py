"""Command line entry point: ``midefense <command> [--config PATH] [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 bound
violation in ``games``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attacks, harness, linreg, nn, tree
from .core import FeatureSchema, SchemaError, UINT64_MAX, SynthConfig, load_csv, synth_generate, write_csv
from .datasets import preset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_BOUND = 0, 1, 2, 3

log = logging.getLogger("midefense")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise harness.ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise harness.ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise harness.ConfigError(f"{path}: top level must be a JSON object")
    return obj


def _merge(cfg: dict, args) -> dict:
    """Flags override file values."""
    cfg = dict(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "out")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise harness.ConfigError(f"config is missing {', '.join(missing)}")


def _schema_and_data(cfg: dict):
    _require(cfg, "data", "schema")
    schema = FeatureSchema.load(cfg["schema"])
    return schema, load_csv(cfg["data"], schema)


def cmd_synth(cfg: dict, args) -> int:
    if "preset" in cfg:
        schema, scfg = preset(cfg["preset"], cfg.get("n"))
    else:
        _require(cfg, "schema", "synth")
        schema = FeatureSchema.from_dict(cfg["schema"])
        scfg = SynthConfig.from_dict(cfg["synth"])
    data = synth_generate(scfg, schema, int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(data, out / "data.csv")
    harness.write_json(out / "schema.json", schema.to_dict())
    print(out / "data.csv")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    _require(cfg, "model")
    _, data = _schema_and_data(cfg)
    defense = cfg.get("defense", {"name": "none"})
    value = float(defense.get("value", 0.0))
    model = harness.train_model(
        cfg["model"], defense.get("name", "none"), value, data, cfg.get("model_params", {}),
        int(cfg["seed"]), float(defense.get("delta", 1e-5)),
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.json"
    path.write_text(model.to_json() + "\n", encoding="utf-8")
    print(path)
    return EXIT_OK


def _load_model(family: str, path: str):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if family == "linreg":
        return linreg.LinearModel.from_dict(obj)
    if family == "tree":
        return tree.DecisionTree.from_dict(obj)
    if family == "nn":
        return nn.MlpVib.from_dict(obj)
    raise harness.ConfigError(f"unknown model family {family!r}")


def cmd_attack(cfg: dict, args) -> int:
    _require(cfg, "model", "model_file")
    _, data = _schema_and_data(cfg)
    model = _load_model(cfg["model"], cfg["model_file"])
    prior = attacks.SensitivePrior(tuple(cfg["prior"])) if "prior" in cfg else attacks.SensitivePrior.from_dataset(data)
    name = cfg.get("attack", "map")
    split = cfg.get("split", "test")
    if name == "prior":
        result = attacks.run_prior_baseline(data, prior, split)
    elif cfg["model"] == "linreg" and name == "map":
        result = attacks.run_map_linreg(model, data, prior, split)
    elif cfg["model"] == "tree" and name in ("map", "map_counts"):
        mode = "blackbox" if name == "map" else "counts"
        result = attacks.run_map_tree(model, data, prior, mode, split, bool(cfg.get("smoothing", False)))
    else:
        raise harness.ConfigError(f"attack {name!r} is not available for model {cfg['model']!r} here")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attack.csv"
    path.write_text(attacks.results_to_csv([result]), encoding="utf-8")
    print(f"{path} accuracy={result.accuracy:.6g}")
    return EXIT_OK


def cmd_sweep(cfg: dict, args) -> int:
    config = harness.ExperimentConfig.from_dict(cfg)
    records = harness.run_sweep(config, jobs=args.jobs)
    for r in records:
        print(
            f"{r.defense:9s} {r.param_name}={r.param_value:<8g} {r.attack:20s} "
            f"{r.utility_metric}={r.utility_mean:.4f} train={r.attack_train_mean:.4f} test={r.attack_test_mean:.4f}"
        )
    print(Path(config.out) / "tradeoff.csv")
    return EXIT_OK


def cmd_games(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    config = harness.GamesConfig.from_dict({k: v for k, v in cfg.items() if k != "out"})
    report = harness.run_games(config)
    path = out / "games.json"
    harness.write_json(path, report)
    print(f"{path} pass={report['pass']}")
    return EXIT_OK if report["pass"] else EXIT_BOUND


def cmd_report(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    src = Path(cfg.get("input", out / "tradeoff.csv"))
    try:
        text = src.read_text(encoding="utf-8")
    except OSError as exc:
        raise harness.ConfigError(f"cannot read {src}: {exc.strerror}") from None
    records = harness.records_from_csv(text)
    if not records:
        raise harness.ConfigError(f"{src} holds no records")
    for p in harness.render_report(records, out):
        print(p)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "games": cmd_games,
    "report": cmd_report,
}


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= UINT64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="midefense", description="Model-inversion defense benchmark.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=_seed, help="base seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise harness.ConfigError("--jobs must be >= 1")
        cfg = _merge(_load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (harness.ConfigError, SchemaError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
