"""Budgeted search over strategy configurations.

``genetic_search`` spends eight evaluations: four uniform samples, then four
strategy-preserving mutations of the two best configurations seen so far.
``reference_search`` is a plain 50-trial random search used as a best/worst
envelope for benchmarking.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from fedsel.strategies import (
    DECIMALS,
    StrategyConfig,
    StrategySchema,
    parse_config_text,
    validate_config,
)

log = logging.getLogger(__name__)

REAL_STEP = 0.1
MUTATION_STALL_LIMIT = 20
SAMPLE_STALL_LIMIT = 10_000

Evaluate = Callable[[StrategyConfig], float]


class SearchSpaceExhausted(RuntimeError):
    pass


def hash_config(config: StrategyConfig) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, reals at four decimals)."""
    canon = config.canonical()
    return hashlib.sha256(canon.to_json().encode("utf-8")).hexdigest()


@dataclass
class FitnessRecord:
    config: StrategyConfig
    fitness: float
    run_ref: str | None = None
    generation: int = 0
    order: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config.to_text(),
                "fitness": self.fitness,
                "run": self.run_ref,
                "generation": self.generation,
                "order": self.order,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "FitnessRecord":
        d = json.loads(line)
        return cls(
            parse_config_text(d["config"]).canonical(),
            float(d["fitness"]),
            d.get("run"),
            int(d.get("generation", 0)),
            int(d.get("order", 0)),
        )


@dataclass
class Archive:
    """Append-only record of every evaluated configuration, unique by hash."""

    records: list[FitnessRecord] = field(default_factory=list)
    hashes: set[str] = field(default_factory=set)
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, config: StrategyConfig) -> bool:
        return hash_config(config) in self.hashes

    def add(self, record: FitnessRecord) -> None:
        h = hash_config(record.config)
        if h in self.hashes:
            raise ValueError(f"duplicate configuration {record.config}")
        record.order = len(self.records)
        self.records.append(record)
        self.hashes.add(h)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")

    def top(self, k: int) -> list[FitnessRecord]:
        # Stable sort: equal fitness keeps evaluation order, so earlier wins.
        return sorted(self.records, key=lambda r: -r.fitness)[:k]

    def best(self) -> FitnessRecord:
        if not self.records:
            raise ValueError("archive is empty")
        return self.top(1)[0]

    def worst(self) -> FitnessRecord:
        return min(self.records, key=lambda r: r.fitness)

    @classmethod
    def load(cls, path: str | Path) -> list[FitnessRecord]:
        path = Path(path)
        if not path.exists():
            return []
        return [FitnessRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]


# ---------------------------------------------------------------------------
# operators


def sample_uniform(schema: StrategySchema, n_clients: int, rng: np.random.Generator) -> StrategyConfig:
    """Uniform strategy among those feasible for ``n_clients``, then uniform parameters."""
    names = [n for n in schema.strategies if schema.feasible(n, n_clients)]
    name = names[int(rng.integers(len(names)))]
    params: dict[str, int | float] = {}
    for p in schema.params_for(name):
        lo, hi = p.domain(n_clients)
        if p.kind == "int":
            params[p.name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            params[p.name] = round(float(rng.uniform(lo, hi)), DECIMALS)
    return validate_config(StrategyConfig(name, params), schema, n_clients)


def mutate(
    parent: StrategyConfig, schema: StrategySchema, rng: np.random.Generator, n_clients: int
) -> StrategyConfig:
    """Integers move by -1, 0 or +1; reals by Unif[-0.1, 0.1]; both clipped to the domain."""
    params: dict[str, int | float] = {}
    for p in schema.params_for(parent.strategy_name):
        lo, hi = p.domain(n_clients)
        x = parent.params[p.name]
        if p.kind == "int":
            params[p.name] = int(min(max(int(x) + int(rng.integers(-1, 2)), lo), hi))
        else:
            eps = float(rng.uniform(-REAL_STEP, REAL_STEP))
            params[p.name] = round(min(max(float(x) + eps, lo), hi), DECIMALS)
    return validate_config(StrategyConfig(parent.strategy_name, params), schema, n_clients)


# ---------------------------------------------------------------------------
# drivers


class _Evaluator:
    """Wraps ``evaluate`` with a call counter and optional replay of prior results."""

    def __init__(self, evaluate: Evaluate, prior: Iterable[FitnessRecord] = ()):
        self.evaluate = evaluate
        self.calls = 0
        self.prior = {hash_config(r.config): r for r in prior}

    def __call__(self, config: StrategyConfig) -> tuple[float, str | None, bool]:
        h = hash_config(config)
        if h in self.prior:
            rec = self.prior[h]
            return rec.fitness, rec.run_ref, True
        self.calls += 1
        try:
            value = self.evaluate(config)
        except Exception as exc:  # noqa: BLE001 - any failed trial scores 0
            log.warning("evaluation of %s failed: %s", config, exc)
            return 0.0, None, False
        ref = None
        if isinstance(value, tuple):
            value, ref = value
        value = float(value)
        if not np.isfinite(value):
            value = 0.0
        return value, ref, False


def _evaluate_batch(
    batch: Sequence[StrategyConfig],
    evaluator: _Evaluator,
    archive: Archive,
    generation: int,
    jobs: int,
) -> None:
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(evaluator, batch))
    else:
        results = [evaluator(c) for c in batch]
    # Commit in candidate order so parallel and sequential runs build the same archive.
    for cfg, (fit, ref, replayed) in zip(batch, results):
        rec = FitnessRecord(cfg, fit, ref, generation)
        if replayed and archive.path is not None:
            path, archive.path = archive.path, None
            archive.add(rec)
            archive.path = path
        else:
            archive.add(rec)


@dataclass
class SearchResult:
    best: FitnessRecord
    archive: Archive
    evaluations: int
    worst: FitnessRecord | None = None


def genetic_search(
    schema: StrategySchema,
    n_clients: int,
    evaluate: Evaluate,
    seed: int,
    generations: int = 2,
    population: int = 4,
    top_k: int = 2,
    mutation_rate: float = 1.0,
    archive_path: str | Path | None = None,
    jobs: int = 1,
) -> SearchResult:
    """Two-stage evolutionary search with a global, deduplicated archive.

    Generation 1 samples ``population`` unique configurations uniformly. Each
    later generation repeatedly picks a parent uniformly from the archive's
    ``top_k`` and mutates it, keeping only unseen hashes. If a slot sees
    ``MUTATION_STALL_LIMIT`` consecutive duplicate mutations (for instance a
    parameterless elite), it is filled by a uniform sample instead.

    ``evaluate`` may return a fitness or ``(fitness, run_ref)``; exceptions and
    non-finite values score 0. With ``archive_path`` set, records already in
    that file are replayed instead of re-evaluated, so an interrupted search
    resumes where it stopped.
    """
    rng = np.random.default_rng(seed)
    prior = Archive.load(archive_path) if archive_path else []
    evaluator = _Evaluator(evaluate, prior)
    archive = Archive(path=Path(archive_path) if archive_path else None)
    # Records present before this call are re-committed by replay, not duplicated in the file.
    seen: set[str] = set()

    def take(cfg: StrategyConfig, batch: list[StrategyConfig]) -> bool:
        h = hash_config(cfg)
        if h in seen:
            return False
        seen.add(h)
        batch.append(cfg)
        return True

    for g in range(1, generations + 1):
        batch: list[StrategyConfig] = []
        if g == 1:
            misses = 0
            while len(batch) < population:
                if not take(sample_uniform(schema, n_clients, rng), batch):
                    misses += 1
                    if misses > SAMPLE_STALL_LIMIT:
                        raise SearchSpaceExhausted("too few distinct configurations for the budget")
        else:
            parents = archive.top(top_k)
            while len(batch) < population:
                placed = False
                for _ in range(MUTATION_STALL_LIMIT):
                    parent = parents[int(rng.integers(len(parents)))].config
                    child = mutate(parent, schema, rng, n_clients) if rng.random() < mutation_rate else parent
                    if take(child, batch):
                        placed = True
                        break
                if not placed:
                    for _ in range(SAMPLE_STALL_LIMIT):
                        if take(sample_uniform(schema, n_clients, rng), batch):
                            placed = True
                            break
                    if not placed:
                        raise SearchSpaceExhausted("too few distinct configurations for the budget")
        _evaluate_batch(batch, evaluator, archive, g, jobs)

    return SearchResult(archive.best(), archive, evaluator.calls)


def reference_search(
    schema: StrategySchema,
    n_clients: int,
    evaluate: Evaluate,
    seed: int,
    trials: int = 50,
    archive_path: str | Path | None = None,
    jobs: int = 1,
) -> SearchResult:
    """``trials`` unique uniform samples; reports the best and the worst."""
    rng = np.random.default_rng(seed)
    prior = Archive.load(archive_path) if archive_path else []
    evaluator = _Evaluator(evaluate, prior)
    archive = Archive(path=Path(archive_path) if archive_path else None)
    seen: set[str] = set()
    batch: list[StrategyConfig] = []
    misses = 0
    while len(batch) < trials:
        cfg = sample_uniform(schema, n_clients, rng)
        h = hash_config(cfg)
        if h in seen:
            misses += 1
            if misses > SAMPLE_STALL_LIMIT:
                raise SearchSpaceExhausted(f"fewer than {trials} distinct configurations")
            continue
        seen.add(h)
        batch.append(cfg)
    _evaluate_batch(batch, evaluator, archive, 1, jobs)
    return SearchResult(archive.best(), archive, evaluator.calls, archive.worst())


def records_summary(records: Sequence[FitnessRecord]) -> list[dict[str, Any]]:
    return [
        {"config": r.config.to_text(), "fitness": r.fitness, "generation": r.generation, "run": r.run_ref}
        for r in records
    ]
