"""``fedsel`` command-line entry point.

Settings are resolved in three layers, later ones winning: built-in defaults,
a JSON config file (``--config``), then individual command-line flags. The
config file accepts these top-level keys::

    {
      "seed": 0,
      "data": {"synthetic": {"n_samples": 1000, "n_features": 254,
                             "n_classes": 2, "separation": 2.0, "scale": 3.0}}
              | {"csv": "path.csv", "label_column": "label"},
      "partition": {"scenario": "iid", "n_clients": 4, "params": {}},
      "architecture": [254, 32, 2],
      "train": {"local_epochs": 1, "learning_rate": 0.02, "batch_size": 32},
      "rounds": 30,
      "holdout": 0.2,
      "strategy": {"strategy_name": "fed_avg"},
      "backend": {"kind": "mock" | "http" | "scripted", "base_url": "...",
                  "model": "...", "timeout": 60, "responses": "file"},
      "repetitions": 10,
      "output": "runs",
      "jobs": 1
    }

Data and partition seeds default to the master seed. Every command that
produces results writes into a fresh run directory named
``<timestamp>-<config hash>`` whose ``config.json`` is written first and is
enough to reproduce the run.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from fedsel import __version__
from fedsel.advisor import (
    HttpChatBackend,
    RetriesExhausted,
    RuleMockBackend,
    ScriptedBackend,
    TransportError,
    build_described_prompts,
    recommend,
)
from fedsel.dataset import (
    BENCHMARK_FEATURES,
    BENCHMARK_SAMPLES,
    BENCHMARK_SCALE,
    BENCHMARK_SEPARATION,
    SCENARIOS,
    CSVFormatError,
    Dataset,
    PartitionError,
    PartitionSpec,
    generate_synthetic,
    load_csv,
    make_partitions,
    save_csv,
)
from fedsel.detect import HeterogeneityReport, build_report
from fedsel.engine import (
    DEFAULT_HOLDOUT,
    DEFAULT_ROUNDS,
    FITNESS_WINDOW,
    Engine,
    RunConfig,
    fitness,
    write_metrics_csv,
)
from fedsel.model import TrainSettings, default_architecture
from fedsel.search import (
    SearchSpaceExhausted,
    genetic_search,
    hash_config,
    records_summary,
    reference_search,
)
from fedsel.strategies import (
    ConfigError,
    StrategyConfig,
    config_from_mapping,
    default_schema,
    parse_config_text,
    validate_config,
)

log = logging.getLogger("fedsel")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_TRANSPORT = 4
EXIT_RETRIES = 5

BENCH_COLUMNS = ("empirical_best", "genetic", "advisor", "fedavg", "empirical_worst")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    """A config field failed validation; the message starts with its dotted path."""


# ---------------------------------------------------------------------------
# experiment config


def _defaults() -> dict[str, Any]:
    return {
        "seed": 0,
        "data": {
            "synthetic": {
                "n_samples": BENCHMARK_SAMPLES,
                "n_features": BENCHMARK_FEATURES,
                "n_classes": 2,
                "separation": BENCHMARK_SEPARATION,
                "scale": BENCHMARK_SCALE,
            }
        },
        "partition": {"scenario": "iid", "n_clients": 4, "params": {}},
        "architecture": None,
        "train": {"local_epochs": 1, "learning_rate": 0.02, "batch_size": 32},
        "rounds": DEFAULT_ROUNDS,
        "holdout": DEFAULT_HOLDOUT,
        "strategy": {"strategy_name": "fed_avg"},
        "backend": {"kind": "mock"},
        "repetitions": 10,
        "trials": 50,
        "output": "runs",
        "jobs": 1,
    }


def _merge(base: dict[str, Any], over: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k == "data" and isinstance(v, dict):
            # A CSV source and the synthetic generator are alternatives; the later layer picks.
            data = copy.deepcopy(out.get("data", {}))
            if v.get("csv"):
                data.pop("synthetic", None)
            elif "synthetic" in v:
                data.pop("csv", None)
            out[k] = _merge(data, v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("params", "strategy"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ValidationError(f"{path}: {message}")


def _as_int(d: dict[str, Any], key: str, path: str, minimum: int | None = None) -> int:
    v = d.get(key)
    _require(isinstance(v, int) and not isinstance(v, bool), f"{path}.{key}", f"expected an integer, got {v!r}")
    if minimum is not None:
        _require(v >= minimum, f"{path}.{key}", f"must be at least {minimum}")
    return v


def _as_float(d: dict[str, Any], key: str, path: str) -> float:
    v = d.get(key)
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"{path}.{key}", f"expected a number, got {v!r}")
    return float(v)


@dataclass
class ExperimentConfig:
    raw: dict[str, Any] = field(default_factory=_defaults)

    @classmethod
    def build(cls, file_values: dict[str, Any] | None, overrides: dict[str, Any]) -> "ExperimentConfig":
        merged = _merge(_defaults(), file_values or {})
        merged = _merge(merged, overrides)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    # accessors -------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def n_clients(self) -> int:
        return int(self.raw["partition"]["n_clients"])

    def validate(self) -> None:
        r = self.raw
        _as_int(r, "seed", "config", 0)
        data = r["data"]
        _require(isinstance(data, dict) and ("csv" in data or "synthetic" in data), "data", "needs a 'csv' path or a 'synthetic' block")
        if "csv" in data and data["csv"] is not None:
            _require(isinstance(data["csv"], str), "data.csv", "expected a path")
        else:
            syn = data["synthetic"]
            _as_int(syn, "n_samples", "data.synthetic", 2)
            _as_int(syn, "n_features", "data.synthetic", 1)
            _as_int(syn, "n_classes", "data.synthetic", 2)
            _require(_as_float(syn, "separation", "data.synthetic") > 0, "data.synthetic.separation", "must be positive")
            if "scale" in syn:
                _require(_as_float(syn, "scale", "data.synthetic") > 0, "data.synthetic.scale", "must be positive")
        part = r["partition"]
        _require(part.get("scenario") in SCENARIOS, "partition.scenario", f"expected one of {', '.join(SCENARIOS)}")
        _as_int(part, "n_clients", "partition", 2)
        _require(isinstance(part.get("params", {}), dict), "partition.params", "expected an object")
        if r.get("architecture") is not None:
            arch = r["architecture"]
            _require(
                isinstance(arch, list) and len(arch) >= 2 and all(isinstance(x, int) and x > 0 for x in arch),
                "architecture",
                "expected a list of at least two positive layer sizes",
            )
        t = r["train"]
        _as_int(t, "local_epochs", "train", 1)
        _as_int(t, "batch_size", "train", 1)
        _require(_as_float(t, "learning_rate", "train") > 0, "train.learning_rate", "must be positive")
        _as_int(r, "rounds", "config", 1)
        h = _as_float(r, "holdout", "config")
        _require(0.0 <= h < 1.0, "holdout", "must lie in [0, 1)")
        _as_int(r, "repetitions", "config", 1)
        _as_int(r, "trials", "config", 1)
        _as_int(r, "jobs", "config", 1)
        _require(isinstance(r["strategy"], dict), "strategy", "expected an object with strategy_name")
        kind = r["backend"].get("kind")
        _require(kind in ("mock", "http", "scripted"), "backend.kind", "expected mock, http or scripted")
        if kind == "http":
            _require(bool(r["backend"].get("base_url")), "backend.base_url", "required for the http backend")
            _require(bool(r["backend"].get("model")), "backend.model", "required for the http backend")
        if kind == "scripted":
            _require(bool(r["backend"].get("responses")), "backend.responses", "required for the scripted backend")

    # builders --------------------------------------------------------------

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        for section in ("partition",):
            raw[section].pop("seed", None)
        if "synthetic" in raw["data"]:
            raw["data"]["synthetic"].pop("seed", None)
        return ExperimentConfig(raw)

    def dataset(self) -> Dataset:
        data = self.raw["data"]
        if data.get("csv"):
            return load_csv(data["csv"], data.get("label_column", "label"))
        syn = data["synthetic"]
        return generate_synthetic(
            int(syn["n_samples"]),
            int(syn["n_features"]),
            int(syn["n_classes"]),
            int(syn.get("seed", self.seed)),
            separation=float(syn["separation"]),
            scale=float(syn.get("scale", 1.0)),
        )

    def partition_spec(self) -> PartitionSpec:
        p = self.raw["partition"]
        try:
            return PartitionSpec(p["scenario"], int(p["n_clients"]), dict(p.get("params", {})), int(p.get("seed", self.seed)))
        except ValueError as exc:
            raise ValidationError(f"partition: {exc}") from exc

    def architecture(self, dataset: Dataset) -> list[int]:
        arch = self.raw.get("architecture")
        if arch is None:
            return default_architecture(dataset.n_features, dataset.n_classes)
        if arch[0] != dataset.n_features:
            raise ValidationError(f"architecture: input size {arch[0]} does not match {dataset.n_features} features")
        return list(arch)

    def train_settings(self) -> TrainSettings:
        t = self.raw["train"]
        return TrainSettings(int(t["local_epochs"]), float(t["learning_rate"]), int(t["batch_size"]))

    def strategy(self) -> StrategyConfig:
        try:
            cfg = config_from_mapping(self.raw["strategy"])
            return validate_config(cfg, default_schema(), self.n_clients)
        except ConfigError as exc:
            raise ValidationError(f"strategy: {exc}") from exc

    def run_config(self, dataset: Dataset, strategy: StrategyConfig) -> RunConfig:
        return RunConfig(
            strategy,
            self.architecture(dataset),
            int(self.raw["rounds"]),
            self.train_settings(),
            self.seed,
            float(self.raw["holdout"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:8]


# ---------------------------------------------------------------------------
# run directories


class RunDirectory:
    def __init__(self, path: Path):
        self.path = path
        self.artifacts: dict[str, str] = {}

    @classmethod
    def create(cls, root: str | Path, config: ExperimentConfig, command: str) -> "RunDirectory":
        root = Path(root)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        base = root / f"{stamp}-{config.digest()}"
        path, k = base, 1
        while path.exists():
            k += 1
            path = base.with_name(f"{base.name}-{k}")
        path.mkdir(parents=True)
        rd = cls(path)
        rd.write_json("config.json", {"command": command, "version": __version__, **config.raw})
        return rd

    def file(self, name: str) -> Path:
        self.artifacts[name.split(".")[0]] = name
        return self.path / name

    def write_json(self, name: str, payload: Any) -> Path:
        p = self.file(name)
        p.write_text(json.dumps(payload, indent=2, default=str) + "\n")
        return p

    def finish(self, summary: dict[str, Any]) -> None:
        self.write_json("summary.json", {**summary, "artifacts": dict(self.artifacts)})


def _run_and_persist(
    run_cfg: RunConfig, partitions, directory: Path, jobs: int = 1
) -> tuple[float, dict[str, Any]]:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "strategy.txt").write_text(run_cfg.strategy.to_text() + "\n")
    result = Engine(run_cfg, jobs).run(partitions)
    write_metrics_csv(result, directory / "metrics.csv")
    summary = {"strategy": run_cfg.strategy.to_text(), **result.summary()}
    (directory / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return fitness(result), summary


# ---------------------------------------------------------------------------
# backends


def make_backend(cfg: ExperimentConfig, transcript: Path | None):
    b = cfg.raw["backend"]
    kind = b.get("kind", "mock")
    if kind == "mock":
        return RuleMockBackend()
    if kind == "scripted":
        return ScriptedBackend.from_file(b["responses"])
    return HttpChatBackend(
        b["base_url"], b["model"], timeout=float(b.get("timeout", 60.0)), transcript=transcript
    )


def _advise(cfg: ExperimentConfig, report: HeterogeneityReport | None, description: str | None, rd: RunDirectory | None):
    transcript = rd.file("transcript.jsonl") if rd else None
    backend = make_backend(cfg, transcript)
    schema = default_schema()
    prompts = build_described_prompts(description, schema, cfg.n_clients) if description else None

    def on_exchange(record: dict[str, Any]) -> None:
        if transcript is not None:
            with transcript.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"event": "advisor", **record}) + "\n")

    return recommend(report, schema, cfg.n_clients, backend, prompts, on_exchange)


# ---------------------------------------------------------------------------
# commands


def _prepare(cfg: ExperimentConfig):
    dataset = cfg.dataset()
    partitions = make_partitions(dataset, cfg.partition_spec())
    return dataset, partitions


def cmd_gen_data(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if cfg.raw["data"].get("csv"):
        raise UsageError("gen-data needs synthetic data settings, not a CSV source")
    data = cfg.dataset()
    save_csv(data, args.out_file)
    print(f"wrote {len(data)} rows x {data.n_features} features to {args.out_file}")
    return EXIT_OK


def cmd_partition(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _, parts = _prepare(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(cfg.partition_spec().to_dict(), indent=2) + "\n")
    for p in parts:
        save_csv(p.data, out / f"client_{p.client_id}.csv")
        counts = ", ".join(str(int(c)) for c in p.data.label_counts())
        print(f"client {p.client_id}: {len(p)} rows, label counts [{counts}]")
    return EXIT_OK


def _detect(cfg: ExperimentConfig, dataset: Dataset, parts) -> HeterogeneityReport:
    return build_report(parts, cfg.architecture(dataset), cfg.train_settings(), seed=cfg.seed)


def cmd_detect(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    rd = RunDirectory.create(cfg.raw["output"], cfg, "detect")
    dataset, parts = _prepare(cfg)
    t0 = time.perf_counter()
    report = _detect(cfg, dataset, parts)
    elapsed = time.perf_counter() - t0
    report.save(rd.file("report.json"))
    rd.file("report.txt").write_text(report.format_b() + "\n")
    rd.finish({"flags": report.format_b().splitlines(), "seconds": elapsed})
    print(report.format_b())
    print(f"run directory: {rd.path}")
    return EXIT_OK


def cmd_recommend(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    rd = RunDirectory.create(cfg.raw["output"], cfg, "recommend")
    dataset, parts = _prepare(cfg)
    report = None
    if args.describe:
        description = args.describe
    else:
        description = None
        report = _detect(cfg, dataset, parts)
        report.save(rd.file("report.json"))
        rd.file("report.txt").write_text(report.format_b() + "\n")
        print(report.format_b())
    try:
        outcome = _advise(cfg, report, description, rd)
    except RetriesExhausted as exc:
        rd.write_json("advisor_failure.json", {"error": str(exc), "raw_responses": exc.raw_responses, "errors": exc.errors})
        raise
    print(f"recommended: {outcome.config.to_text()} (attempt {outcome.attempts})")
    fit, summary = _run_and_persist(cfg.run_config(dataset, outcome.config), parts, rd.path, cfg.raw["jobs"])
    rd.artifacts["metrics"] = "metrics.csv"
    rd.finish({**summary, "attempts": outcome.attempts, "raw_responses": outcome.raw_responses})
    print(f"fitness: {fit:.4f}")
    print(f"run directory: {rd.path}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    strategy = cfg.strategy()
    rd = RunDirectory.create(cfg.raw["output"], cfg, "run")
    dataset, parts = _prepare(cfg)
    fit, summary = _run_and_persist(cfg.run_config(dataset, strategy), parts, rd.path, cfg.raw["jobs"])
    rd.artifacts["metrics"] = "metrics.csv"
    rd.finish(summary)
    print(f"{strategy.to_text()} status={summary['status']} fitness={fit:.4f}")
    print(f"run directory: {rd.path}")
    return EXIT_OK


def _trial_evaluator(cfg: ExperimentConfig, dataset: Dataset, parts, trials_dir: Path) -> Callable:
    def evaluate(strategy: StrategyConfig):
        directory = trials_dir / hash_config(strategy)[:12]
        fit, _ = _run_and_persist(cfg.run_config(dataset, strategy), parts, directory)
        return fit, directory.name

    return evaluate


def _search_dir(cfg: ExperimentConfig, args: argparse.Namespace, command: str) -> RunDirectory:
    if getattr(args, "resume", None):
        path = Path(args.resume)
        if not (path / "config.json").exists():
            raise UsageError(f"{path} is not a run directory")
        rd = RunDirectory(path)
        rd.artifacts["config"] = "config.json"
        return rd
    return RunDirectory.create(cfg.raw["output"], cfg, command)


def _load_resume_config(args: argparse.Namespace) -> dict[str, Any] | None:
    if getattr(args, "resume", None):
        path = Path(args.resume) / "config.json"
        if path.exists():
            raw = json.loads(path.read_text())
            raw.pop("command", None)
            raw.pop("version", None)
            return raw
    return None


def _check_rounds(cfg: ExperimentConfig) -> None:
    if cfg.raw["rounds"] < FITNESS_WINDOW:
        raise ValidationError(f"rounds: search needs at least {FITNESS_WINDOW} rounds")


def cmd_search(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _check_rounds(cfg)
    rd = _search_dir(cfg, args, "search")
    dataset, parts = _prepare(cfg)
    trials = rd.path / "trials"
    trials.mkdir(exist_ok=True)
    result = genetic_search(
        default_schema(),
        cfg.n_clients,
        _trial_evaluator(cfg, dataset, parts, trials),
        cfg.seed,
        archive_path=rd.file("archive.jsonl"),
        jobs=cfg.raw["jobs"],
    )
    rd.finish(
        {
            "best": result.best.config.to_text(),
            "best_fitness": result.best.fitness,
            "evaluations_this_session": result.evaluations,
            "records": records_summary(result.archive.records),
        }
    )
    for r in result.archive.records:
        print(f"gen {r.generation}  {r.fitness:.4f}  {r.config.to_text()}")
    print(f"best: {result.best.config.to_text()} fitness={result.best.fitness:.4f}")
    print(f"run directory: {rd.path}")
    return EXIT_OK


def cmd_hpo_ref(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _check_rounds(cfg)
    rd = _search_dir(cfg, args, "hpo-ref")
    dataset, parts = _prepare(cfg)
    trials = rd.path / "trials"
    trials.mkdir(exist_ok=True)
    result = reference_search(
        default_schema(),
        cfg.n_clients,
        _trial_evaluator(cfg, dataset, parts, trials),
        cfg.seed,
        trials=int(cfg.raw["trials"]),
        archive_path=rd.file("archive.jsonl"),
        jobs=cfg.raw["jobs"],
    )
    assert result.worst is not None
    rd.finish(
        {
            "best": result.best.config.to_text(),
            "best_fitness": result.best.fitness,
            "worst": result.worst.config.to_text(),
            "worst_fitness": result.worst.fitness,
            "evaluations_this_session": result.evaluations,
        }
    )
    print(f"best:  {result.best.config.to_text()} fitness={result.best.fitness:.4f}")
    print(f"worst: {result.worst.config.to_text()} fitness={result.worst.fitness:.4f}")
    print(f"run directory: {rd.path}")
    return EXIT_OK


@dataclass
class BenchRow:
    seed: int
    values: dict[str, float]
    seconds: dict[str, float]


def bench_once(cfg: ExperimentConfig, backend_description: str | None = None) -> BenchRow:
    """All five approaches on one seed's partitions."""
    dataset, parts = _prepare(cfg)
    schema = default_schema()
    n = cfg.n_clients

    def ev(strategy: StrategyConfig) -> float:
        return fitness(Engine(cfg.run_config(dataset, strategy)).run(parts))

    values: dict[str, float] = {}
    seconds: dict[str, float] = {}

    t = time.perf_counter()
    values["fedavg"] = ev(StrategyConfig("fed_avg", {}))
    seconds["fedavg"] = time.perf_counter() - t

    t = time.perf_counter()
    report = None if backend_description else _detect(cfg, dataset, parts)
    outcome = _advise(cfg, report, backend_description, None)
    values["advisor"] = ev(outcome.config)
    seconds["advisor"] = time.perf_counter() - t

    t = time.perf_counter()
    values["genetic"] = genetic_search(schema, n, ev, cfg.seed).best.fitness
    seconds["genetic"] = time.perf_counter() - t

    t = time.perf_counter()
    ref = reference_search(schema, n, ev, cfg.seed, trials=int(cfg.raw["trials"]))
    seconds["empirical_best"] = seconds["empirical_worst"] = time.perf_counter() - t
    values["empirical_best"] = ref.best.fitness
    assert ref.worst is not None
    values["empirical_worst"] = ref.worst.fitness
    return BenchRow(cfg.seed, values, seconds)


def format_bench_table(rows: Sequence[BenchRow]) -> tuple[list[list[str]], str]:
    """CSV rows and an aligned text table of mean and std per approach.

    Standard deviations need at least two repetitions; with one, the std
    cells are left empty and the text table shows the mean only.
    """
    if not rows:
        raise ValueError("no benchmark rows")
    show_std = len(rows) >= 2
    header = ["statistic", *BENCH_COLUMNS]
    mat = np.array([[r.values[c] for c in BENCH_COLUMNS] for r in rows])
    secs = np.array([[r.seconds[c] for c in BENCH_COLUMNS] for r in rows])
    mean = mat.mean(axis=0)
    csv_rows = [header, ["mean", *(f"{x:.4f}" for x in mean)]]
    if show_std:
        std = mat.std(axis=0, ddof=1)
        csv_rows.append(["std", *(f"{x:.4f}" for x in std)])
    else:
        csv_rows.append(["std", *([""] * len(BENCH_COLUMNS))])
    csv_rows.append(["mean_seconds", *(f"{x:.2f}" for x in secs.mean(axis=0))])

    cells = [
        f"{m:.4f} ± {s:.4f}" if show_std else f"{m:.4f}"
        for m, s in zip(mean, mat.std(axis=0, ddof=1) if show_std else mean)
    ]
    widths = [max(len(h), len(c)) for h, c in zip(BENCH_COLUMNS, cells)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(BENCH_COLUMNS, widths))
    line2 = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    text = f"{line1}\n{line2}\n(R = {len(rows)})"
    if not show_std:
        text += "; std needs at least two repetitions"
    return csv_rows, text


def cmd_bench(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _check_rounds(cfg)
    reps = int(cfg.raw["repetitions"])
    rd = RunDirectory.create(cfg.raw["output"], cfg, "bench")
    rows = []
    for r in range(reps):
        row = bench_once(cfg.with_seed(cfg.seed + r), args.describe)
        rows.append(row)
        log.info("repetition %d: %s", r + 1, row.values)
        print(f"seed {row.seed}: " + " ".join(f"{k}={row.values[k]:.4f}" for k in BENCH_COLUMNS))
    with rd.file("bench_runs.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *BENCH_COLUMNS, *(f"{c}_seconds" for c in BENCH_COLUMNS)])
        for row in rows:
            w.writerow([row.seed, *(f"{row.values[c]:.6f}" for c in BENCH_COLUMNS), *(f"{row.seconds[c]:.3f}" for c in BENCH_COLUMNS)])
    table_rows, text = format_bench_table(rows)
    with rd.file("bench.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows(table_rows)
    rd.file("bench.txt").write_text(text + "\n")
    rd.finish({"repetitions": reps})
    if reps < 2:
        print("fewer than two repetitions: std not reported", file=sys.stderr)
    print(text)
    print(f"run directory: {rd.path}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[ExperimentConfig, argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "detect": cmd_detect,
    "recommend": cmd_recommend,
    "run": cmd_run,
    "search": cmd_search,
    "hpo-ref": cmd_hpo_ref,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep argparse's exit code but route through our handler
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _scenario_param(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except ValueError:
        return key, value


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    g.add_argument("--config", type=Path, help="JSON config file; flags override its fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--data", help="CSV data source (replaces the synthetic generator)")
    g.add_argument("--label-column", help="label column of the CSV source")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--n-features", type=int)
    g.add_argument("--n-classes", type=int)
    g.add_argument("--separation", type=float)
    g.add_argument("--scale", type=float, help="multiplier on generated features")
    g.add_argument("--scenario", choices=SCENARIOS)
    g.add_argument("--n-clients", type=int)
    g.add_argument("--scenario-param", action="append", type=_scenario_param, default=[], metavar="KEY=VALUE",
                   help="scenario parameter, value parsed as JSON when possible (repeatable)")
    g.add_argument("--architecture", help="comma-separated layer sizes, e.g. 254,32,2")
    g.add_argument("--rounds", type=int)
    g.add_argument("--local-epochs", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--holdout", type=float, help="per-client evaluation fraction")
    g.add_argument("--out", dest="output", help="root directory for run directories")
    g.add_argument("--jobs", type=int, help="worker threads")
    g.add_argument("-v", "--verbose", action="count", default=0)


def _backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("advisor backend")
    m = g.add_mutually_exclusive_group()
    m.add_argument("--mock", action="store_true", help="offline rule-table backend")
    m.add_argument("--mock-echo", "--scripted", dest="scripted", metavar="FILE",
                   help="replay canned responses from FILE")
    m.add_argument("--backend-url", help="OpenAI-compatible base URL")
    g.add_argument("--model", help="model name for the HTTP backend")
    g.add_argument("--timeout", type=float)
    g.add_argument("--describe", metavar="TEXT", help="free-text heterogeneity description instead of detection")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsel", description="Aggregation strategy selection for simulated federated learning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    _common(p)
    p.add_argument("out_file", type=Path)

    p = sub.add_parser("partition", help="split data into client CSV files")
    _common(p)
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("detect", help="label skew, feature skew and outlier report")
    _common(p)

    p = sub.add_parser("recommend", help="detect, ask the advisor, run the advised strategy")
    _common(p)
    _backend_flags(p)

    p = sub.add_parser("run", help="one federation with a given strategy")
    _common(p)
    p.add_argument("--strategy", help="strategy as a dict literal, e.g. \"{'strategy_name': 'krum', ...}\"")

    for name, helptext in (("search", "8-trial genetic search"), ("hpo-ref", "random-search reference envelope")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted search in RUN_DIR")
        if name == "hpo-ref":
            p.add_argument("--trials", type=int)

    p = sub.add_parser("bench", help="compare all approaches over repeated seeds")
    _common(p)
    _backend_flags(p)
    p.add_argument("--repetitions", "-R", type=int)
    p.add_argument("--trials", type=int, help="reference-search trials per repetition")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    o: dict[str, Any] = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        o["seed"] = args.seed
    if get("data"):
        o["data"] = {"csv": args.data}
        if get("label_column"):
            o["data"]["label_column"] = args.label_column
    elif get("label_column"):
        o["data"] = {"label_column": args.label_column}
    syn = {k: get(k) for k in ("n_samples", "n_features", "n_classes", "separation", "scale") if get(k) is not None}
    if syn:
        if get("data"):
            raise UsageError("--data cannot be combined with synthetic generator flags")
        o.setdefault("data", {})["synthetic"] = syn
    part = {k: get(k) for k in ("scenario", "n_clients") if get(k) is not None}
    if get("scenario_param"):
        part["params"] = dict(args.scenario_param)
    if part:
        o["partition"] = part
    if get("architecture"):
        try:
            o["architecture"] = [int(x) for x in args.architecture.split(",")]
        except ValueError:
            raise UsageError(f"bad --architecture {args.architecture!r}") from None
    train = {k: get(k) for k in ("local_epochs", "learning_rate", "batch_size") if get(k) is not None}
    if train:
        o["train"] = train
    for k in ("rounds", "holdout", "output", "jobs", "repetitions", "trials"):
        if get(k) is not None:
            o[k] = get(k)
    if get("strategy"):
        try:
            o["strategy"] = parse_config_text(args.strategy).to_dict()
        except ConfigError as exc:
            raise ValidationError(f"--strategy: {exc}") from exc
    backend: dict[str, Any] = {}
    if get("mock"):
        backend["kind"] = "mock"
    elif get("scripted"):
        backend.update(kind="scripted", responses=args.scripted)
    elif get("backend_url"):
        backend.update(kind="http", base_url=args.backend_url)
    if get("model"):
        backend["model"] = args.model
    if get("timeout") is not None:
        backend["timeout"] = args.timeout
    if backend:
        o["backend"] = backend
    return o


def _load_config_file(path: Path | None) -> dict[str, Any] | None:
    if path is None:
        return None
    try:
        values = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    if "data" in values and not (
        isinstance(values["data"], dict) and (values["data"].get("csv") or values["data"].get("synthetic"))
    ):
        raise UsageError(f"{path}: data needs a 'csv' path or a 'synthetic' block")
    values.pop("command", None)
    values.pop("version", None)
    return values


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        file_values = _load_config_file(args.config)
        resumed = _load_resume_config(args)
        if resumed is not None:
            file_values = resumed
        cfg = ExperimentConfig.build(file_values, overrides_from_args(args))
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"fedsel: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ConfigError, PartitionError, CSVFormatError) as exc:
        print(f"fedsel: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TransportError as exc:
        print(f"fedsel: backend transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except RetriesExhausted as exc:
        print(f"fedsel: {exc}", file=sys.stderr)
        for i, raw in enumerate(exc.raw_responses, 1):
            print(f"  response {i}: {raw!r}", file=sys.stderr)
        return EXIT_RETRIES
    except SearchSpaceExhausted as exc:
        print(f"fedsel: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"fedsel: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"fedsel: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
