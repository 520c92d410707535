"""Experiment orchestration: sweeps, tradeoff records, plot data and game checks.

A sweep trains one model per (defense, grid value, repetition), attacks it
on its own training split and on the held-out split, and aggregates means
and standard errors over repetitions.  Repetition ``i`` uses seed
``base + i`` for every grid point, so grid points are compared on the same
splits.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, games, linreg, metrics, nn, tree
from .core import Dataset, FeatureSchema, SynthConfig, derive_seed, format_real, load_csv, synth_generate, train_test_split
from .datasets import preset

__all__ = [
    "ConfigError",
    "SweepError",
    "ExperimentConfig",
    "TradeoffRecord",
    "load_dataset",
    "train_model",
    "run_sweep",
    "records_to_csv",
    "records_from_csv",
    "emit_plotdata",
    "render_report",
    "GamesConfig",
    "run_games",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
DEFAULT_EPSILONS = (0.1, 0.3, 1.0, 3.0, 10.0, 100.0)
DEFAULT_REPS = {"linreg": 100, "tree": 100, "nn": 3}
DEFAULT_TREE_DEPTH = 3
DEFAULT_ATTACKS = {"linreg": ("map",), "tree": ("map", "map_counts"), "nn": ("knowledge_alignment",)}
PARAM_NAMES = {"none": "none", "mid": "lambda", "dp": "epsilon", "priority": "min_depth"}


class ConfigError(ValueError):
    """Invalid experiment or games configuration (CLI exit code 1)."""


class SweepError(RuntimeError):
    """A grid point failed; completed records were flushed first."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DefenseSpec:
    name: str  # none | mid | dp | priority
    grid: tuple[float, ...] = (0.0,)
    delta: float = 1e-5

    @classmethod
    def from_dict(cls, obj: dict, model: str) -> "DefenseSpec":
        name = obj.get("name")
        if name not in PARAM_NAMES:
            raise ConfigError(f"unknown defense {name!r}")
        if name == "priority" and model != "tree":
            raise ConfigError("the priority defense applies to trees only")
        default = {"none": (0.0,), "mid": DEFAULT_LAMBDAS, "dp": DEFAULT_EPSILONS, "priority": (1, 2, 3)}[name]
        grid = tuple(float(v) for v in obj.get("grid", default))
        if not grid:
            raise ConfigError(f"defense {name!r} has an empty grid")
        if name == "mid" and min(grid) < 0:
            raise ConfigError("lambda grid values must be >= 0")
        if name == "dp" and min(grid) <= 0:
            raise ConfigError("epsilon grid values must be > 0")
        delta = float(obj.get("delta", 1e-5))
        if not 0 < delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        return cls(name, grid, delta)


@dataclass
class ExperimentConfig:
    """Everything a sweep needs; see README for the JSON layout."""

    model: str
    defenses: tuple[DefenseSpec, ...]
    dataset: dict = field(default_factory=lambda: {"synth": "iwpc"})
    attacks: tuple[str, ...] = ()
    repetitions: int = 0
    test_fraction: float = 0.2
    seed: int = 0
    out: str = "out"
    model_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in DEFAULT_REPS:
            raise ConfigError(f"unknown model family {self.model!r}")
        if not self.defenses:
            raise ConfigError("at least one defense is required")
        if not self.attacks:
            self.attacks = DEFAULT_ATTACKS[self.model]
        allowed = set(DEFAULT_ATTACKS[self.model]) | {"prior"}
        bad = [a for a in self.attacks if a not in allowed]
        if bad:
            raise ConfigError(f"attacks {bad} do not apply to model {self.model!r}")
        if self.repetitions == 0:
            self.repetitions = DEFAULT_REPS[self.model]
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if "synth" not in self.dataset and "csv" not in self.dataset:
            raise ConfigError("dataset needs either 'synth' or 'csv' + 'schema'")
        if "csv" in self.dataset and "schema" not in self.dataset:
            raise ConfigError("a csv dataset needs a 'schema' path")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        try:
            model = obj["model"]
            defenses = tuple(DefenseSpec.from_dict(d, model) for d in obj.get("defenses", [{"name": "mid"}]))
            return cls(
                model=model,
                defenses=defenses,
                dataset=dict(obj.get("dataset", {"synth": "iwpc"})),
                attacks=tuple(obj.get("attacks", ())),
                repetitions=int(obj.get("repetitions", 0)),
                test_fraction=float(obj.get("test_fraction", 0.2)),
                seed=int(obj.get("seed", 0)),
                out=str(obj.get("out", "out")),
                model_params=dict(obj.get("model_params", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defenses"] = [asdict(x) for x in self.defenses]
        return d


def load_dataset(spec: dict, seed: int) -> Dataset:
    """Dataset from ``{"synth": preset, "n": N}`` or ``{"csv": path, "schema": path}``."""
    if "csv" in spec:
        return load_csv(spec["csv"], FeatureSchema.load(spec["schema"]))
    try:
        schema, cfg = preset(spec["synth"], spec.get("n"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return synth_generate(cfg, schema, seed)


def synth_source(spec: dict) -> tuple[FeatureSchema, SynthConfig] | None:
    if "synth" in spec:
        return preset(spec["synth"], spec.get("n"))
    return None


# ---------------------------------------------------------------------------
# Training and evaluation of one cell


def _dpsgd_noise_for(epsilon: float, sample_rate: float, steps: int, delta: float) -> float:
    """Smallest noise multiplier whose accounted epsilon is <= the target (bisection)."""
    lo, hi = 1e-3, 1.0
    while nn.dpsgd_epsilon(hi, sample_rate, steps, delta) > epsilon:
        hi *= 2.0
        if hi > 1e8:
            raise ConfigError(f"epsilon {epsilon} is out of reach for DPSGD with {steps} steps")
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if nn.dpsgd_epsilon(mid, sample_rate, steps, delta) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def train_model(model: str, defense: str, value: float, train: Dataset, params: dict, seed: int, delta: float = 1e-5):
    """Fit one model under one defense setting."""
    if model == "linreg":
        ridge = float(params.get("ridge", 0.0))
        if defense == "none":
            return linreg.train_ridge(train, ridge)
        if defense == "mid":
            bw = params.get("bandwidth")
            cfg = linreg.MidLinConfig(lam=value, ridge=ridge, bandwidth=None if bw is None else float(bw))
            return linreg.train_mid_linear(train, cfg)
        if defense == "dp":
            by = float(params.get("bound_y", np.max(np.abs(train.labels))))
            bounds = (linreg.schema_row_bound(train.schema), by)
            return linreg.train_adassp(train, value, delta, bounds, seed)
    elif model == "tree":
        cfg = tree.TreeConfig(
            criterion=params.get("criterion", "infogain"),
            lam=value if defense == "mid" else 0.0,
            max_depth=int(params.get("max_depth", DEFAULT_TREE_DEPTH)),
        )
        if defense in ("none", "mid"):
            return tree.train_id3(train, cfg)
        if defense == "dp":
            return tree.train_dp_id3(train, value, cfg, seed)
        if defense == "priority":
            return tree.train_priority(train, cfg, int(value))
    elif model == "nn":
        epochs = int(params.get("epochs", 30))
        batch = int(params.get("batch_size", 32))
        if defense in ("none", "mid"):
            cfg = nn.VibConfig(lam=value if defense == "mid" else 0.0, epochs=epochs, batch_size=batch, seed=seed)
            return nn.train_vib(train, cfg)
        if defense == "dp":
            steps = epochs * math.ceil(train.n / batch)
            sigma = _dpsgd_noise_for(value, min(batch / train.n, 1.0), steps, delta)
            cfg = nn.DpsgdConfig(
                clip_norm=float(params.get("clip_norm", 1.0)),
                noise_multiplier=sigma,
                epochs=epochs,
                batch_size=batch,
                target_delta=delta,
                seed=seed,
            )
            return nn.train_dpsgd(train, cfg)[0]
    raise ConfigError(f"defense {defense!r} is not available for model {model!r}")


def _confidence_oracle(model_obj):
    if isinstance(model_obj, tree.DecisionTree):
        return lambda rows: tree.predict_batch(model_obj, rows)[1]
    return lambda rows: nn.predict_proba(model_obj, rows)


def _utility(model_obj, test: Dataset) -> tuple[str, float, float | None]:
    if isinstance(model_obj, linreg.LinearModel):
        return "mse", metrics.mse(model_obj.predict(test.rows), test.labels), None
    conf = _confidence_oracle(model_obj)(test.rows)
    pred = np.argmax(conf, axis=1)
    correct = pred == test.labels
    return "accuracy", metrics.accuracy(pred, test.labels), metrics.ece(conf.max(axis=1), correct).ece


def _attack(name: str, model_obj, data: Dataset, prior, split: str, inversion=None) -> float:
    if name == "prior":
        return attacks.run_prior_baseline(data, prior, split).accuracy
    if name == "map" and isinstance(model_obj, linreg.LinearModel):
        return attacks.run_map_linreg(model_obj, data, prior, split).accuracy
    if name == "map":
        return attacks.run_map_tree(model_obj, data, prior, "blackbox", split).accuracy
    if name == "map_counts":
        return attacks.run_map_tree(model_obj, data, prior, "counts", split).accuracy
    if name == "knowledge_alignment":
        return attacks.run_knowledge_alignment(inversion, _confidence_oracle(model_obj), data, split).accuracy
    raise ConfigError(f"unknown attack {name!r}")


def run_cell(cfg: dict, d_index: int, value: float, rep: int) -> dict:
    """One (defense, value, repetition) run; returns raw measurements."""
    config = ExperimentConfig.from_dict(cfg)
    defense = config.defenses[d_index]
    data = load_dataset(config.dataset, config.seed)
    rep_seed = config.seed + rep
    train, test = train_test_split(data, config.test_fraction, derive_seed(rep_seed, 1))
    model_obj = train_model(
        config.model, defense.name, value, train, config.model_params, derive_seed(rep_seed, 2), defense.delta
    )
    prior = attacks.SensitivePrior.from_dataset(train)
    umetric, utility, ece_value = _utility(model_obj, test)
    inversion = None
    if "knowledge_alignment" in config.attacks:
        src = synth_source(config.dataset)
        if src is not None:
            schema, scfg = src
            aux = synth_generate(scfg, schema, derive_seed(rep_seed, 3))
        else:
            aux = test
        inv_cfg = attacks.InversionConfig(epochs=int(config.model_params.get("inversion_epochs", 50)),
                                          seed=derive_seed(rep_seed, 4))
        inversion = attacks.train_inversion_model(_confidence_oracle(model_obj), aux, inv_cfg)
    out = {"utility_metric": umetric, "utility": utility, "ece": ece_value, "attacks": {}, "prior_test": None}
    for name in config.attacks:
        out["attacks"][name] = (
            _attack(name, model_obj, train, prior, "train", inversion),
            _attack(name, model_obj, test, prior, "test", inversion),
        )
    out["prior_test"] = attacks.run_prior_baseline(test, prior).accuracy
    return out


# ---------------------------------------------------------------------------
# Records


RECORD_FIELDS = (
    "model",
    "defense",
    "param_name",
    "param_value",
    "attack",
    "utility_metric",
    "utility_mean",
    "utility_stderr",
    "attack_metric",
    "attack_train_mean",
    "attack_train_stderr",
    "attack_test_mean",
    "attack_test_stderr",
    "attack_gap_mean",
    "attack_gap_stderr",
    "ece_mean",
    "ece_stderr",
    "prior_test_mean",
    "prior_test_stderr",
    "repetitions",
)


@dataclass(frozen=True)
class TradeoffRecord:
    model: str
    defense: str
    param_name: str
    param_value: float
    attack: str
    utility_metric: str
    utility_mean: float
    utility_stderr: float
    attack_metric: str
    attack_train_mean: float
    attack_train_stderr: float
    attack_test_mean: float
    attack_test_stderr: float
    attack_gap_mean: float  # train minus test, paired per repetition
    attack_gap_stderr: float
    ece_mean: float  # nan for regression
    ece_stderr: float
    prior_test_mean: float
    prior_test_stderr: float
    repetitions: int


def _mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.all(np.isnan(v)):
        return math.nan, math.nan
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


def _aggregate(config: ExperimentConfig, d_index: int, value: float, runs: list[dict]) -> list[TradeoffRecord]:
    defense = config.defenses[d_index]
    u = _mean_stderr([r["utility"] for r in runs])
    e = _mean_stderr([math.nan if r["ece"] is None else r["ece"] for r in runs])
    pr = _mean_stderr([r["prior_test"] for r in runs])
    out = []
    for name in config.attacks:
        tr = _mean_stderr([r["attacks"][name][0] for r in runs])
        te = _mean_stderr([r["attacks"][name][1] for r in runs])
        gap = _mean_stderr([r["attacks"][name][0] - r["attacks"][name][1] for r in runs])
        out.append(TradeoffRecord(
            config.model, defense.name, PARAM_NAMES[defense.name], float(value), name,
            runs[0]["utility_metric"], u[0], u[1], "accuracy", tr[0], tr[1], te[0], te[1],
            gap[0], gap[1], e[0], e[1], pr[0], pr[1], len(runs),
        ))
    return out


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([format_real(v) if isinstance(v, float) else v for v in (getattr(r, f) for f in RECORD_FIELDS)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[TradeoffRecord]:
    reader = csv.DictReader(io.StringIO(text))
    types = TradeoffRecord.__annotations__
    out = []
    for row in reader:
        kw = {}
        for f in RECORD_FIELDS:
            t = types[f]
            kw[f] = int(row[f]) if t == "int" else float(row[f]) if t.startswith("float") else row[f]
        out.append(TradeoffRecord(**kw))
    return out


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def run_sweep(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> list[TradeoffRecord]:
    """All grid points x repetitions; writes ``<out>/tradeoff.csv`` when ``write``."""
    cfg = config.to_dict()
    tasks = [
        (di, value, rep)
        for di, d in enumerate(config.defenses)
        for value in d.grid
        for rep in range(config.repetitions)
    ]
    results: dict[tuple, dict] = {}
    records: list[TradeoffRecord] = []
    out_path = Path(config.out) / "tradeoff.csv"

    def flush():
        if write:
            _write(out_path, records_to_csv(records))

    def finish_point(di, value):
        runs = [results[(di, value, r)] for r in range(config.repetitions)]
        records.extend(_aggregate(config, di, value, runs))

    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futs = {t: pool.submit(run_cell, cfg, *t) for t in tasks}
                for t in tasks:
                    try:
                        results[t] = futs[t].result()
                    except Exception as exc:
                        raise _cell_error(config, t, exc) from exc
                    if t[2] == config.repetitions - 1:
                        finish_point(t[0], t[1])
        else:
            for t in tasks:
                try:
                    results[t] = run_cell(cfg, *t)
                except Exception as exc:
                    raise _cell_error(config, t, exc) from exc
                if t[2] == config.repetitions - 1:
                    finish_point(t[0], t[1])
    except SweepError:
        flush()
        raise
    flush()
    return records


def _cell_error(config, task, exc) -> SweepError:
    di, value, rep = task
    d = config.defenses[di]
    return SweepError(f"{config.model}/{d.name} {PARAM_NAMES[d.name]}={value} repetition {rep}: {exc}")


# ---------------------------------------------------------------------------
# Plot data and report

PLOT_COLUMNS = (
    ("series", "defense name"),
    ("param_name", "swept hyperparameter"),
    ("param_value", "hyperparameter value"),
    ("utility", "x: mean utility over repetitions"),
    ("utility_stderr", "standard error of utility"),
    ("attack", "y: mean test-split attack accuracy"),
    ("attack_stderr", "standard error of the attack accuracy"),
    ("attack_train", "mean train-split attack accuracy"),
)


def plotdata_series(records) -> dict[tuple[str, str], list[TradeoffRecord]]:
    groups: dict[tuple[str, str], list[TradeoffRecord]] = {}
    for r in records:
        groups.setdefault((r.model, r.attack), []).append(r)
    for key, rows in groups.items():
        rows.sort(key=lambda r: (r.defense, r.utility_mean, r.param_value))
    return groups


def emit_plotdata(records, out_dir) -> list[Path]:
    """One CSV per (model, attack) with a ``.columns.txt`` sidecar; returns the CSV paths."""
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    out_dir = Path(out_dir)
    paths = []
    sidecar = "".join(f"{name}: {desc}\n" for name, desc in PLOT_COLUMNS)
    for (model, attack), rows in sorted(plotdata_series(records).items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([c for c, _ in PLOT_COLUMNS])
        for r in rows:
            w.writerow([
                r.defense, r.param_name, format_real(r.param_value), format_real(r.utility_mean),
                format_real(r.utility_stderr), format_real(r.attack_test_mean),
                format_real(r.attack_test_stderr), format_real(r.attack_train_mean),
            ])
        path = out_dir / f"plot_{model}_{attack}.csv"
        _write(path, buf.getvalue())
        _write(path.with_suffix(".columns.txt"), sidecar)
        paths.append(path)
    return paths


def render_report(records, out_dir) -> list[Path]:
    """Plot data CSVs plus one PNG per (model, attack) drawn with matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_paths = emit_plotdata(records, out_dir)
    pngs = []
    for (model, attack), rows in sorted(plotdata_series(records).items()):
        fig, ax = plt.subplots(figsize=(5, 4))
        for defense in sorted({r.defense for r in rows}):
            pts = [r for r in rows if r.defense == defense]
            ax.errorbar(
                [r.utility_mean for r in pts],
                [r.attack_test_mean for r in pts],
                xerr=[r.utility_stderr for r in pts],
                yerr=[r.attack_test_stderr for r in pts],
                marker="o",
                capsize=2,
                label=defense,
            )
        prior = np.mean([r.prior_test_mean for r in rows])
        ax.axhline(prior, color="grey", linestyle=":", label="prior baseline")
        ax.set_xlabel(f"utility ({rows[0].utility_metric})")
        ax.set_ylabel("attack accuracy (test)")
        ax.set_title(f"{model}: {attack}")
        ax.legend()
        fig.tight_layout()
        path = Path(out_dir) / f"plot_{model}_{attack}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        pngs.append(path)
    return csv_paths + pngs


# ---------------------------------------------------------------------------
# Games


@dataclass
class GamesConfig:
    trials: int = 100_000
    seed: int = 0
    ns: tuple[int, ...] = (1, 2, 5)
    epsilon: float = 1.0
    delta: float = 0.0
    declared_epsilon: float | None = None
    theorem1_joints: int = 3
    theorem1_n: int = 5
    rr_probe: bool = True
    joint: tuple[float, ...] | None = None  # 8 entries of p[x_s, x_ns, y]; default: correlated_joint()

    def __post_init__(self):
        if self.joint is not None:
            if len(self.joint) != 8:
                raise ConfigError("joint must list the 8 cells of a 2 x 2 x 2 table")
            try:
                games.DiscreteJoint(np.asarray(self.joint, dtype=float).reshape(2, 2, 2))
            except ValueError as exc:
                raise ConfigError(f"joint: {exc}") from None
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.ns or min(self.ns) < 1:
            raise ConfigError("ns must be a non-empty list of positive sizes")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not 0 <= self.delta < 1:
            raise ConfigError("delta must lie in [0, 1)")
        if self.declared_epsilon is not None and not self.declared_epsilon >= 0:
            raise ConfigError("declared_epsilon must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "GamesConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown games config fields {sorted(extra)}")
        kw = dict(obj)
        if "ns" in kw:
            kw["ns"] = tuple(int(v) for v in kw["ns"])
        if kw.get("joint") is not None:
            kw["joint"] = tuple(float(v) for v in kw["joint"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def correlated_joint(strength: float = 0.9) -> games.DiscreteJoint:
    """Uniform ``(x_ns, y)``; ``x_s`` copies ``y`` with probability ``strength``."""
    t = np.empty((2, 2, 2))
    for s in range(2):
        for y in range(2):
            t[s, :, y] = (strength if s == y else 1.0 - strength) / 4.0
    return games.DiscreteJoint(t)


def rr_probe_domain() -> tuple[games.DiscreteJoint, np.ndarray]:
    """x_s determined by (x_ns, y) on a 4 x 4 grid, 16 sensitive codes, uniform."""
    table = np.zeros((16, 4, 4))
    match = np.zeros((16, 4, 4), dtype=bool)
    for a in range(4):
        for b in range(4):
            table[4 * a + b, a, b] = 1.0 / 16.0
            match[4 * a + b, a, b] = True
    return games.DiscreteJoint(table), match


def run_games(config: GamesConfig) -> dict:
    """Theorem-2 bound checks, the randomized-response probe and Theorem-1 chains."""
    rng = np.random.default_rng(derive_seed(config.seed, 7))
    shape = (2, 2, 2)
    tau = games.PropertyFunction.identity(2)
    if config.joint is None:
        p = correlated_joint()
    else:
        p = games.DiscreteJoint(np.asarray(config.joint, dtype=float).reshape(shape))
    declared = config.epsilon if config.declared_epsilon is None else config.declared_epsilon
    mech = games.LaplaceHistogram(shape, declared, noise_epsilon=config.epsilon, delta=config.delta)
    dists = {
        "constant0": games.constant_distinguisher(0),
        "random": games.random_distinguisher(),
        "likelihood_ratio": games.likelihood_ratio_distinguisher(p),
        "constructed:plugin": games.constructed_distinguisher(games.plugin_adversary(tau), p, tau),
    }
    bound_checks = [
        games.verify_dp_bound(dists, mech, p, n, config.trials, derive_seed(config.seed, 10 + n)) for n in config.ns
    ]
    report = {"joint": p.table.ravel().tolist(), "dp_bound": bound_checks}
    ok = all(c["pass"] for c in bound_checks)
    if config.rr_probe:
        joint, match = rr_probe_domain()
        rr = games.RandomizedResponse(match, config.epsilon)
        g = games.run_ind_experiment(games.rr_distinguisher(), rr, joint, 1, config.trials, derive_seed(config.seed, 20))
        bound = games.dp_gain_bound(1, config.epsilon, 0.0)
        report["rr_probe"] = {
            **g.to_dict(),
            "bound": bound,
            "relative_gap": (bound - g.estimate) / bound,
            "within_5pct": (bound - g.estimate) / bound <= 0.05,
            "pass": g.estimate <= bound + 3.0 * g.ci,
        }
        ok = ok and report["rr_probe"]["pass"]
    chains = []
    for j in range(config.theorem1_joints):
        pj = games.random_joint(shape, rng, 0.5)
        t1 = games.verify_theorem1(
            {"plugin": games.plugin_adversary(tau), "constant0": games.constant_adversary(0)},
            {"constant0": games.constant_distinguisher(0), "likelihood_ratio": games.likelihood_ratio_distinguisher(pj)},
            games.NonPrivateHistogram(shape),
            pj,
            tau,
            config.theorem1_n,
            config.trials,
            derive_seed(config.seed, 30 + j),
        )
        t1["joint"] = pj.table.ravel().tolist()
        chains.append(t1)
    report["theorem1"] = chains
    ok = ok and all(c["pass"] for c in chains)
    report["pass"] = bool(ok)
    return report


def write_json(path, obj) -> None:
    _write(Path(path), json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def cpu_count() -> int:
    return os.cpu_count() or 1
