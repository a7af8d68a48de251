"""Synchronous federated rounds over in-process simulated clients."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedsel._rng import derive_seed
from fedsel.dataset import ClientPartition
from fedsel.model import (
    ClientUpdate,
    ModelParams,
    TrainSettings,
    TrainingDiverged,
    evaluate,
    init_model,
    local_train,
)
from fedsel.strategies import StrategyConfig, aggregate, client_proximal_mu

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 30
FITNESS_WINDOW = 5
DEFAULT_HOLDOUT = 0.2


@dataclass
class RunConfig:
    strategy: StrategyConfig
    architecture: Sequence[int]
    rounds: int = DEFAULT_ROUNDS
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0
    # Fraction of each client's partition kept out of training and used for
    # evaluation; 0 evaluates on the full (training) partition.
    holdout: float = DEFAULT_HOLDOUT

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")


@dataclass
class RunResult:
    weighted_accuracy: list[float] = field(default_factory=list)
    client_accuracies: list[list[float]] = field(default_factory=list)
    client_sizes: list[int] = field(default_factory=list)
    status: str = "ok"
    failure_reason: str | None = None
    rounds_requested: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def summary(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "failure_reason": self.failure_reason,
            "rounds_requested": self.rounds_requested,
            "rounds_completed": len(self.weighted_accuracy),
            "final_weighted_accuracy": self.weighted_accuracy[-1] if self.weighted_accuracy else None,
            "fitness": fitness(self),
            "client_sizes": self.client_sizes,
        }


def weighted_accuracy(accuracies: Sequence[float], sizes: Sequence[int]) -> float:
    n = np.asarray(sizes, dtype=np.float64)
    return float(np.dot(n, np.asarray(accuracies, dtype=np.float64)) / n.sum())


def fitness(result: RunResult, window: int = FITNESS_WINDOW) -> float:
    """Mean weighted accuracy of the last ``window`` rounds; exactly 0 for a failed run."""
    if not result.ok or not result.weighted_accuracy:
        return 0.0
    return float(np.mean(result.weighted_accuracy[-window:]))


def split_holdout(
    partitions: Sequence[ClientPartition], fraction: float, seed: int
) -> tuple[list[ClientPartition], list[ClientPartition]]:
    """Per-client random train/eval split; with ``fraction == 0`` both sides are the full partition."""
    if fraction == 0:
        return list(partitions), list(partitions)
    train, held = [], []
    for p in partitions:
        n = len(p)
        n_eval = min(max(1, int(round(fraction * n))), n - 1) if n > 1 else 0
        if n_eval == 0:
            train.append(p)
            held.append(p)
            continue
        order = np.random.default_rng(derive_seed(seed, "holdout", p.client_id)).permutation(n)
        ev, tr = np.sort(order[:n_eval]), np.sort(order[n_eval:])
        train.append(ClientPartition(p.client_id, p.data.subset(tr), p.indices[tr] if p.indices.size else p.indices))
        held.append(ClientPartition(p.client_id, p.data.subset(ev), p.indices[ev] if p.indices.size else p.indices))
    return train, held


def train_clients(
    global_params: ModelParams,
    partitions: Sequence[ClientPartition],
    settings: TrainSettings,
    seed: int,
    round_idx: int,
    pool: ThreadPoolExecutor | None = None,
) -> list[ClientUpdate]:
    """One round of local training; results are ordered by client_id."""

    def work(part: ClientPartition) -> ClientUpdate:
        s = derive_seed(seed, "round", round_idx, "client", part.client_id)
        return local_train(global_params, part.data, settings, s, part.client_id)

    if pool is None:
        updates = [work(p) for p in partitions]
    else:
        updates = list(pool.map(work, partitions))
    return sorted(updates, key=lambda u: u.client_id)


class Engine:
    """Runs one federation. Not shared between concurrent runs."""

    def __init__(self, config: RunConfig, jobs: int = 1):
        self.config = config
        self.jobs = max(1, int(jobs))

    def run(self, partitions: Sequence[ClientPartition]) -> RunResult:
        cfg = self.config
        if len(partitions) < 2:
            raise ValueError("a federation needs at least two clients")
        parts, held = split_holdout(
            sorted(partitions, key=lambda p: p.client_id), cfg.holdout, cfg.seed
        )
        settings = TrainSettings(
            cfg.train.local_epochs,
            cfg.train.learning_rate,
            cfg.train.batch_size,
            client_proximal_mu(cfg.strategy),
        )
        result = RunResult(client_sizes=[len(p) for p in held], rounds_requested=cfg.rounds)
        global_params = init_model(cfg.architecture, derive_seed(cfg.seed, "global_init"))
        pool = ThreadPoolExecutor(self.jobs) if self.jobs > 1 else None
        try:
            for r in range(cfg.rounds):
                try:
                    updates = train_clients(global_params, parts, settings, cfg.seed, r, pool)
                except TrainingDiverged as exc:
                    return self._fail(result, r, str(exc))
                global_params = aggregate(cfg.strategy, updates, global_params)
                if not global_params.is_finite():
                    return self._fail(result, r, "aggregated model is not finite")
                accs = [evaluate(global_params, p.data)[0] for p in held]
                result.client_accuracies.append(accs)
                result.weighted_accuracy.append(weighted_accuracy(accs, result.client_sizes))
        finally:
            if pool is not None:
                pool.shutdown()
        self.final_params = global_params
        return result

    @staticmethod
    def _fail(result: RunResult, round_idx: int, reason: str) -> RunResult:
        log.info("run failed at round %d: %s", round_idx + 1, reason)
        result.status = "failed"
        result.failure_reason = f"round {round_idx + 1}: {reason}"
        return result


def run_federation(
    config: RunConfig, partitions: Sequence[ClientPartition], jobs: int = 1
) -> RunResult:
    return Engine(config, jobs).run(partitions)


def write_metrics_csv(result: RunResult, path: str | Path) -> None:
    n_clients = len(result.client_sizes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "weighted_accuracy"] + [f"client_{i}_acc" for i in range(n_clients)])
        for r, (wa, accs) in enumerate(zip(result.weighted_accuracy, result.client_accuracies), 1):
            w.writerow([r, f"{wa:.6f}"] + [f"{a:.6f}" for a in accs])
