"""Tabular datasets and the per-client partitions used to simulate heterogeneity.

Every partitioner returns fresh ``ClientPartition`` objects; inputs are never
modified. Randomness comes from ``seed`` only, split into purpose-tagged
sub-streams.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedsel._rng import derive_seed, make_rng

#: Mahalanobis distance between class means used by ``generate_synthetic``.
DEFAULT_SEPARATION = 3.2

SCENARIOS = (
    "iid",
    "label_skew",
    "feature_skew",
    "noisy_label",
    "label_poisoning",
    "corrupted_client",
    "dirichlet",
)

#: Per-client (mean, std) noise of the feature-skew scenario.
DEFAULT_FEATURE_NOISE = ((0.0, 0.1), (0.0, 0.5), (1.0, 0.1), (-0.1, 0.1))
DEFAULT_LABEL_PROPORTIONS = (0.9, 0.7, 0.5, 0.1)

#: Benchmark preset: 1000 binary samples with 254 features, a feature count
#: typical of vibration-spectrum tabular data. Classes overlap enough that
#: accuracy stays well below 1 and strategies can be told apart. The raw scale
#: sets how large the fixed-size corruption noise is relative to the data.
BENCHMARK_SAMPLES = 1000
BENCHMARK_FEATURES = 254
BENCHMARK_SEPARATION = 2.0
BENCHMARK_SCALE = 3.0


class PartitionError(ValueError):
    pass


class CSVFormatError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"labels length {labels.shape} does not match {features.shape[0]} feature rows"
            )
        if self.n_classes < 2:
            raise ValueError("a dataset needs at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    data: Dataset
    # Row indices into the source dataset; lets callers audit that a split is a partition.
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.data)


@dataclass
class PartitionSpec:
    """Declarative description of one heterogeneity scenario.

    ``params`` keys by scenario:

    * ``label_skew``: ``proportions`` (one per client), ``client_size``
      (default: the largest equal size the class pools allow)
    * ``feature_skew``: ``noise`` as a list of ``[mean, std]`` pairs
    * ``noisy_label``: ``client_id``, ``fraction`` (default 0.3)
    * ``label_poisoning`` / ``corrupted_client``: ``client_id``
    * ``dirichlet``: ``alpha``

    Scenarios other than ``label_skew`` and ``dirichlet`` start from an IID split.
    The target client defaults to the last one.
    """

    scenario: str = "iid"
    n_clients: int = 4
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        p = self.params
        if self.scenario == "label_skew":
            props = p.get("proportions")
            if props is None and self.n_clients != len(DEFAULT_LABEL_PROPORTIONS):
                raise ValueError("default label-skew proportions are defined for 4 clients only")
            if props is None:
                props = DEFAULT_LABEL_PROPORTIONS
            if len(props) != self.n_clients:
                raise ValueError("label_skew needs one proportion per client")
            if any(not 0.0 < float(x) < 1.0 for x in props):
                raise ValueError("label_skew proportions must lie in (0, 1)")
        if self.scenario == "dirichlet" and float(p.get("alpha", 0.5)) <= 0:
            raise ValueError("dirichlet alpha must be positive")
        if self.scenario == "noisy_label" and not 0.0 <= float(p.get("fraction", 0.3)) <= 1.0:
            raise ValueError("flip fraction must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "n_clients": self.n_clients,
            "params": dict(self.params),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PartitionSpec":
        return cls(
            scenario=d.get("scenario", "iid"),
            n_clients=int(d.get("n_clients", 4)),
            params=dict(d.get("params", {})),
            seed=int(d.get("seed", 0)),
        )


# ---------------------------------------------------------------------------
# sources


def benchmark_dataset(seed: int) -> Dataset:
    return generate_synthetic(
        BENCHMARK_SAMPLES,
        BENCHMARK_FEATURES,
        2,
        seed,
        separation=BENCHMARK_SEPARATION,
        scale=BENCHMARK_SCALE,
    )


def generate_synthetic(
    n_samples: int,
    n_features: int,
    n_classes: int,
    seed: int,
    separation: float = DEFAULT_SEPARATION,
    scale: float = 1.0,
) -> Dataset:
    """Class-conditional Gaussian clusters with a shared anisotropic covariance.

    Class means sit on a sphere and are rescaled so that the closest pair is
    ``separation`` apart in Mahalanobis distance. Class counts are balanced to
    within one sample.
    """
    if n_samples < n_classes:
        raise ValueError("n_samples must be at least n_classes")
    if n_features < 1 or n_classes < 2:
        raise ValueError("need n_features >= 1 and n_classes >= 2")
    rng = make_rng(seed, "synthetic")

    q, _ = np.linalg.qr(rng.standard_normal((n_features, n_features)))
    scales = np.linspace(1.5, 0.5, n_features) if n_features > 1 else np.ones(1)
    mix = q * scales  # noise = z @ mix.T has covariance q diag(scales^2) q^T
    cov_inv = (q / scales**2) @ q.T

    dirs = rng.standard_normal((n_classes, n_features))
    if n_classes == 2:
        dirs[1] = -dirs[0]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    closest = min(
        math.sqrt(float((dirs[a] - dirs[b]) @ cov_inv @ (dirs[a] - dirs[b])))
        for a in range(n_classes)
        for b in range(a + 1, n_classes)
    )
    means = dirs * (separation / closest)

    labels = np.arange(n_samples) % n_classes
    labels = rng.permutation(labels)
    noise = rng.standard_normal((n_samples, n_features)) @ mix.T
    return Dataset(scale * (means[labels] + noise), labels, n_classes)


def load_csv(path: str | Path, label_column: str | int) -> Dataset:
    """Read a header-first comma-delimited numeric table.

    Labels are re-encoded to ``0..K-1`` in first-seen order. Row numbers in
    error messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if isinstance(label_column, int):
            if not -len(header) <= label_column < len(header):
                raise CSVFormatError(f"label column index {label_column} out of range", row=1)
            label_idx = label_column % len(header)
        else:
            if label_column not in header:
                raise CSVFormatError(f"unknown label column {label_column!r}", row=1)
            label_idx = header.index(label_column)

        encoding: dict[str, int] = {}
        rows: list[list[float]] = []
        labels: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVFormatError(
                    f"expected {len(header)} cells, found {len(row)}", row=lineno
                )
            values = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise CSVFormatError("missing value", row=lineno, column=header[j])
                if j == label_idx:
                    labels.append(encoding.setdefault(cell, len(encoding)))
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CSVFormatError(
                        f"non-numeric value {cell!r}", row=lineno, column=header[j]
                    ) from None
                if not math.isfinite(v):
                    raise CSVFormatError(f"non-finite value {cell!r}", row=lineno, column=header[j])
                values.append(v)
            rows.append(values)

    if not rows:
        raise CSVFormatError(f"{path} has no data rows")
    n_classes = max(2, len(encoding))
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), n_classes)


def save_csv(dataset: Dataset, path: str | Path, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.n_features)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# ---------------------------------------------------------------------------
# partitioners


def _to_partitions(dataset: Dataset, groups: Sequence[np.ndarray]) -> list[ClientPartition]:
    out = []
    for cid, idx in enumerate(groups):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        out.append(ClientPartition(cid, dataset.subset(idx), idx))
    return out


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[ClientPartition]:
    """Stratified random split: each class is dealt round-robin across clients."""
    if n_clients < 1:
        raise PartitionError("n_clients must be positive")
    if len(dataset) < n_clients:
        raise PartitionError(f"{len(dataset)} samples cannot fill {n_clients} clients")
    rng = make_rng(seed, "iid")
    groups: list[list[int]] = [[] for _ in range(n_clients)]
    dealer = 0
    for k in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == k))
        for i in idx:
            groups[dealer].append(int(i))
            dealer = (dealer + 1) % n_clients
    return _to_partitions(dataset, [np.array(g) for g in groups])


def partition_label_skew(
    dataset: Dataset, proportions: Sequence[float], client_size: int, seed: int
) -> list[ClientPartition]:
    """Client ``i`` gets ``round(p_i * client_size)`` class-1 samples, the rest class 0."""
    if dataset.n_classes != 2:
        raise PartitionError("label skew partitioning needs a binary dataset")
    if client_size < 1:
        raise PartitionError("client_size must be positive")
    rng = make_rng(seed, "label_skew")
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == k))) for k in (0, 1)]
    groups = []
    for cid, p in enumerate(proportions):
        if not 0.0 < p < 1.0:
            raise PartitionError(f"proportion {p} for client {cid} outside (0, 1)")
        n1 = int(round(p * client_size))
        need = (client_size - n1, n1)
        taken = []
        for k in (0, 1):
            if len(pools[k]) < need[k]:
                raise PartitionError(
                    f"class {k} pool exhausted at client {cid}: "
                    f"needs {need[k]}, {len(pools[k])} left"
                )
            taken.extend(pools[k][: need[k]])
            del pools[k][: need[k]]
        groups.append(np.array(taken))
    return _to_partitions(dataset, groups)


def max_label_skew_size(dataset: Dataset, proportions: Sequence[float]) -> int:
    """Largest equal client size the class pools can supply, capped at ``len // n``."""
    counts = dataset.label_counts()
    size = len(dataset) // len(proportions)
    while size > 0:
        n1 = sum(int(round(p * size)) for p in proportions)
        if n1 <= counts[1] and len(proportions) * size - n1 <= counts[0]:
            return size
        size -= 1
    raise PartitionError("class pools cannot supply even one sample per client")


def partition_dirichlet(
    dataset: Dataset, n_clients: int, alpha: float, seed: int, max_attempts: int = 100
) -> list[ClientPartition]:
    """Per-class Dirichlet(alpha) shares over clients, assigned multinomially."""
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    if len(dataset) == 0:
        raise PartitionError("cannot partition an empty dataset")
    for attempt in range(max_attempts):
        rng = np.random.default_rng(derive_seed(seed, "dirichlet", attempt))
        groups: list[list[int]] = [[] for _ in range(n_clients)]
        for k in range(dataset.n_classes):
            idx = rng.permutation(np.flatnonzero(dataset.labels == k))
            if idx.size == 0:
                continue
            shares = rng.dirichlet(np.full(n_clients, float(alpha)))
            counts = rng.multinomial(idx.size, shares)
            for cid, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                groups[cid].extend(chunk.tolist())
        if all(groups):
            return _to_partitions(dataset, [np.array(g) for g in groups])
    raise PartitionError(
        f"could not give every one of {n_clients} clients a sample after {max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# perturbations


def _replace(parts: Sequence[ClientPartition], cid: int, data: Dataset) -> list[ClientPartition]:
    return [
        ClientPartition(p.client_id, data, p.indices) if p.client_id == cid else p for p in parts
    ]


def _find(parts: Sequence[ClientPartition], client_id: int) -> ClientPartition:
    for p in parts:
        if p.client_id == client_id:
            return p
    raise PartitionError(f"no client with id {client_id}")


def apply_feature_noise(
    partitions: Sequence[ClientPartition],
    noise: Sequence[tuple[float, float]],
    seed: int = 0,
) -> list[ClientPartition]:
    """Add N(mean, std^2) noise elementwise, one (mean, std) pair per client."""
    if len(noise) != len(partitions):
        raise PartitionError(f"got {len(noise)} noise pairs for {len(partitions)} clients")
    out = []
    for part, (mean, std) in zip(partitions, noise):
        if std < 0:
            raise PartitionError(f"negative noise std {std} for client {part.client_id}")
        x = part.data.features
        if std > 0:
            rng = make_rng(seed, "feature_noise", part.client_id)
            x = x + rng.normal(mean, std, size=x.shape)
        elif mean != 0:
            x = x + mean
        data = Dataset(x, part.data.labels, part.data.n_classes)
        out.append(ClientPartition(part.client_id, data, part.indices))
    return out


def flip_labels(
    partitions: Sequence[ClientPartition], client_id: int, fraction: float, seed: int = 0
) -> list[ClientPartition]:
    """Invert exactly ``round(fraction * n)`` uniformly chosen binary labels of one client."""
    if not 0.0 <= fraction <= 1.0:
        raise PartitionError(f"flip fraction {fraction} outside [0, 1]")
    part = _find(partitions, client_id)
    if part.data.n_classes != 2:
        raise PartitionError("label flipping needs binary labels")
    n = len(part)
    k = int(round(fraction * n))
    rng = make_rng(seed, "flip", client_id)
    chosen = rng.choice(n, size=k, replace=False)
    labels = part.data.labels.copy()
    labels[chosen] = 1 - labels[chosen]
    return _replace(partitions, client_id, Dataset(part.data.features, labels, 2))


def corrupt_client(
    partitions: Sequence[ClientPartition], client_id: int, seed: int = 0
) -> list[ClientPartition]:
    """Feature noise N(1, 0.5^2) plus a full label flip on one client."""
    noise = [(1.0, 0.5) if p.client_id == client_id else (0.0, 0.0) for p in partitions]
    noisy = apply_feature_noise(partitions, noise, seed)
    return flip_labels(noisy, client_id, 1.0, seed)


def make_partitions(dataset: Dataset, spec: PartitionSpec) -> list[ClientPartition]:
    """Build the client partitions described by ``spec``."""
    p = spec.params
    n = spec.n_clients
    seed = spec.seed
    target = int(p.get("client_id", n - 1))
    if spec.scenario == "label_skew":
        props = [float(x) for x in p.get("proportions", DEFAULT_LABEL_PROPORTIONS)]
        size = int(p["client_size"]) if "client_size" in p else max_label_skew_size(dataset, props)
        return partition_label_skew(dataset, props, size, seed)
    if spec.scenario == "dirichlet":
        return partition_dirichlet(dataset, n, float(p.get("alpha", 0.5)), seed)

    parts = partition_iid(dataset, n, seed)
    if spec.scenario == "feature_skew":
        noise = p.get("noise")
        if noise is None:
            if n != len(DEFAULT_FEATURE_NOISE):
                raise PartitionError("default feature-skew noise is defined for 4 clients only")
            noise = DEFAULT_FEATURE_NOISE
        return apply_feature_noise(parts, [(float(m), float(s)) for m, s in noise], seed)
    if spec.scenario == "noisy_label":
        return flip_labels(parts, target, float(p.get("fraction", 0.3)), seed)
    if spec.scenario == "label_poisoning":
        return flip_labels(parts, target, 1.0, seed)
    if spec.scenario == "corrupted_client":
        return corrupt_client(parts, target, seed)
    return parts
