"""Heterogeneity diagnostics: label skew, feature skew and outlier clients.

Each detector only looks at what a federated server would see: per-client
label histograms, aggregated moment statistics, projected centroids, and
client model parameters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fedsel._rng import derive_seed
from fedsel.dataset import ClientPartition, Dataset
from fedsel.engine import train_clients
from fedsel.model import ModelParams, TrainSettings, init_model
from fedsel.strategies import StrategyConfig, aggregate

log = logging.getLogger(__name__)

LABEL_SKEW_THRESHOLD = 0.1
FEATURE_SKEW_THRESHOLD = 1.0
STD_FLOOR = 1e-12
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000
PROBE_SUBSAMPLE = 0.5


# ---------------------------------------------------------------------------
# label skew


def label_distribution(data: Dataset, n_labels: int | None = None) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("empty partition has no label distribution")
    counts = np.bincount(data.labels, minlength=n_labels or data.n_classes).astype(np.float64)
    return counts / counts.sum()


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def jsd(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon divergence in bits, so the result lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions differ in length: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    val = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return min(max(val, 0.0), 1.0)


def _aligned_distributions(partitions: Sequence[ClientPartition]) -> np.ndarray:
    # Label sets are aligned on the union of ids seen anywhere, zero-filled.
    n_labels = max(max(p.data.n_classes for p in partitions), 1)
    for p in partitions:
        if len(p) == 0:
            raise ValueError(f"client {p.client_id} has an empty partition")
    return np.stack([label_distribution(p.data, n_labels) for p in partitions])


def detect_label_skew(
    partitions: Sequence[ClientPartition], threshold: float = LABEL_SKEW_THRESHOLD
) -> tuple[bool, float, list[float]]:
    """Flag label skew when some client's JSD to the (unweighted) global mix exceeds ``threshold``."""
    if len(partitions) < 2:
        raise ValueError("label skew detection needs at least two clients")
    dists = _aligned_distributions(partitions)
    global_dist = dists.mean(axis=0)
    per_client = [jsd(d, global_dist) for d in dists]
    worst = max(per_client)
    return worst > threshold, worst, per_client


def entropy(p: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz))) + 0.0


def entropy_spread(partitions: Sequence[ClientPartition]) -> float:
    """Max minus min per-client label entropy.

    Kept as a diagnostic only: two very different distributions can share an
    entropy, so this never feeds the heterogeneity report.
    """
    if len(partitions) < 2:
        raise ValueError("entropy spread needs at least two clients")
    ents = [entropy(d) for d in _aligned_distributions(partitions)]
    return max(ents) - min(ents)


# ---------------------------------------------------------------------------
# feature skew (two-round federated PCA)


@dataclass
class MomentStats:
    n: int
    sum: np.ndarray
    sum_sq: np.ndarray
    cross: np.ndarray  # full symmetric d x d of sum x_j x_k; the upper triangle is what travels

    @classmethod
    def of(cls, x: np.ndarray) -> "MomentStats":
        x = np.asarray(x, dtype=np.float64)
        cross = x.T @ x
        return cls(x.shape[0], x.sum(axis=0), np.einsum("ij,ij->j", x, x), cross)

    def upper(self) -> np.ndarray:
        return self.cross[np.triu_indices(self.cross.shape[0])]

    def __add__(self, other: "MomentStats") -> "MomentStats":
        return MomentStats(
            self.n + other.n, self.sum + other.sum, self.sum_sq + other.sum_sq, self.cross + other.cross
        )


def combine_moments(stats: Sequence[MomentStats]) -> MomentStats:
    total = stats[0]
    for s in stats[1:]:
        total = total + s
    return total


def covariance_from_moments(stats: MomentStats) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and covariance (divisor ``n``) from aggregated moments."""
    mean = stats.sum / stats.n
    cov = stats.cross / stats.n - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def top_components(
    cov: np.ndarray, k: int = 2, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Each vector is unit norm with its largest-magnitude entry positive. If an
    eigenvalue gap is too small for power iteration to converge, the pair is
    taken from a full eigendecomposition instead.
    """
    cov = np.array(cov, dtype=np.float64)
    d = cov.shape[0]
    if cov.shape != (d, d) or k > d:
        raise ValueError(f"need a square matrix with at least {k} rows")
    work = cov.copy()
    vecs, vals = [], []
    start = np.ones(d) / math.sqrt(d) + np.linspace(0, 1e-3, d)
    for comp in range(k):
        v = start - sum((start @ u) * u for u in vecs) if vecs else start.copy()
        v /= np.linalg.norm(v)
        converged = False
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                converged = True  # remaining spectrum is zero; any orthogonal v will do
                break
            w /= norm
            if w @ v < 0:
                w = -w
            if np.linalg.norm(w - v) < tol:
                v = w
                converged = True
                break
            v = w
        if not converged:
            log.debug("power iteration stalled on component %d; using eigh", comp)
            evals, evecs = np.linalg.eigh(cov)
            v = evecs[:, np.argsort(evals)[::-1][comp]]
        v = _fix_sign(v)
        lam = float(v @ cov @ v)
        vecs.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    return np.array(vecs), np.array(vals)


@dataclass
class PCABasis:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # k x d, rows orthonormal
    eigenvalues: np.ndarray
    covariance: np.ndarray  # of the standardized features


def fed_pca_round1(partitions: Sequence[ClientPartition], k: int = 2) -> PCABasis:
    """Server-side PCA over standardized features from client moment statistics.

    Clients first report count, sum and sum of squares so the server can fix a
    global mean and standard deviation; they then report full moments of their
    standardized features, from which the covariance is assembled.
    """
    d = partitions[0].data.n_features
    if d < k:
        raise ValueError(f"need at least {k} features for a {k}-component PCA")
    raw = combine_moments([MomentStats.of(p.data.features) for p in partitions])
    mean = raw.sum / raw.n
    var = np.maximum(raw.sum_sq / raw.n - mean**2, 0.0)
    scale = np.maximum(np.sqrt(var), STD_FLOOR)

    std_stats = combine_moments(
        [MomentStats.of((p.data.features - mean) / scale) for p in partitions]
    )
    _, cov = covariance_from_moments(std_stats)
    comps, vals = top_components(cov, k)
    return PCABasis(mean, scale, comps, vals, cov)


def fed_pca_round2(partitions: Sequence[ClientPartition], basis: PCABasis) -> np.ndarray:
    """Each client's mean projected point in the shared component space."""
    cents = []
    for p in partitions:
        z = (p.data.features - basis.mean) / basis.scale
        cents.append((z @ basis.components.T).mean(axis=0))
    return np.array(cents)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def detect_feature_skew(
    partitions: Sequence[ClientPartition], threshold: float = FEATURE_SKEW_THRESHOLD
) -> tuple[bool, float, np.ndarray]:
    if len(partitions) < 2:
        raise ValueError("feature skew detection needs at least two clients")
    basis = fed_pca_round1(partitions)
    dist = pairwise_distances(fed_pca_round2(partitions, basis))
    worst = float(dist.max())
    return worst > threshold, worst, dist


# ---------------------------------------------------------------------------
# outliers


def pairwise_divergence(a: ModelParams, b: ModelParams) -> float:
    """Sum over layers of the per-layer L2 distance (not the norm of the concatenation)."""
    return float(sum(np.linalg.norm(x - y) for x, y in zip(a.layers, b.layers)))


def divergence_scores(params_list: Sequence[ModelParams]) -> np.ndarray:
    """Mean pairwise divergence of each client to every other client."""
    n = len(params_list)
    if n < 2:
        raise ValueError("divergence scores need at least two clients")
    first = params_list[0]
    for p in params_list[1:]:
        if not p.same_shape(first):
            raise ValueError("client parameter shapes differ")
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = pairwise_divergence(params_list[i], params_list[j])
    return np.array([sum(D[i, j] for j in range(n) if j != i) / (n - 1) for i in range(n)])


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    s = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(s)))
    return s[rank - 1]


def subsample_partitions(
    partitions: Sequence[ClientPartition], fraction: float, seed: int
) -> list[ClientPartition]:
    """Random ``fraction`` of each client's rows, drawn without replacement."""
    if fraction >= 1.0:
        return list(partitions)
    out = []
    for p in partitions:
        n = len(p)
        m = min(n, max(1, int(round(fraction * n))))
        rng = np.random.default_rng(derive_seed(seed, "probe_subsample", p.client_id))
        idx = np.sort(rng.choice(n, size=m, replace=False))
        out.append(ClientPartition(p.client_id, p.data.subset(idx), p.indices[idx] if p.indices.size else p.indices))
    return out


def round_two_params(
    partitions: Sequence[ClientPartition],
    architecture: Sequence[int],
    train: TrainSettings,
    seed: int,
    subsample: float = 1.0,
) -> list[ModelParams]:
    """Client parameters after local training in round 2, before aggregation."""
    parts = subsample_partitions(sorted(partitions, key=lambda p: p.client_id), subsample, seed)
    plain = TrainSettings(train.local_epochs, train.learning_rate, train.batch_size, 0.0)
    fedavg = StrategyConfig("fed_avg", {})
    g = init_model(architecture, derive_seed(seed, "global_init"))
    updates = train_clients(g, parts, plain, seed, 0)
    g = aggregate(fedavg, updates, g)
    return [u.params for u in train_clients(g, parts, plain, seed, 1)]


def detect_outliers(
    partitions: Sequence[ClientPartition],
    architecture: Sequence[int],
    repetitions: int = 5,
    rep_threshold: int = 4,
    percentile: float = 90.0,
    train: TrainSettings | None = None,
    seed: int = 0,
    subsample: float = PROBE_SUBSAMPLE,
) -> tuple[bool, list[int]]:
    """Flag clients whose round-2 divergence is in the top percentile often enough.

    Every repetition runs two fresh FedAvg rounds with its own seed, and each
    client trains on a fresh random ``subsample`` of its rows, so a repetition
    resamples data as well as initialisation and batch order. With the
    nearest-rank percentile and four clients, only the maximum is flagged.
    """
    if len(partitions) < 3:
        raise ValueError("outlier detection needs at least three clients")
    train = train or TrainSettings()
    ids = sorted(p.client_id for p in partitions)
    counts = [0] * len(ids)
    for r in range(repetitions):
        params = round_two_params(
            partitions, architecture, train, derive_seed(seed, "outlier", r), subsample
        )
        scores = divergence_scores(params)
        cut = nearest_rank_percentile(scores, percentile)
        for i, s in enumerate(scores):
            if s >= cut:
                counts[i] += 1
    return max(counts) >= rep_threshold, counts


# ---------------------------------------------------------------------------
# report


@dataclass
class HeterogeneityReport:
    n_clients: int
    label_skew: bool
    max_jsd: float
    feature_skew: bool
    max_centroid_distance: float
    outlier_risk: bool
    flag_counts: list[int]
    thresholds: dict[str, float] = field(default_factory=dict)
    per_client_jsd: list[float] = field(default_factory=list)
    centroid_distances: list[list[float]] = field(default_factory=list)
    entropy_spread: float | None = None

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return self.label_skew, self.feature_skew, self.outlier_risk

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HeterogeneityReport":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "HeterogeneityReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def format_b(self) -> str:
        yn = lambda b: "Yes" if b else "No"  # noqa: E731
        return (
            f"Label Skew: {yn(self.label_skew)}\n"
            f"Feature Skew: {yn(self.feature_skew)}\n"
            f"Outlier Risk: {yn(self.outlier_risk)}"
        )


def build_report(
    partitions: Sequence[ClientPartition],
    architecture: Sequence[int],
    train: TrainSettings | None = None,
    seed: int = 0,
    label_threshold: float = LABEL_SKEW_THRESHOLD,
    feature_threshold: float = FEATURE_SKEW_THRESHOLD,
    repetitions: int = 5,
    rep_threshold: int = 4,
    percentile: float = 90.0,
) -> HeterogeneityReport:
    ls_flag, max_js, per_client = detect_label_skew(partitions, label_threshold)
    fs_flag, max_dist, dist = detect_feature_skew(partitions, feature_threshold)
    out_flag, counts = detect_outliers(
        partitions, architecture, repetitions, rep_threshold, percentile, train, seed
    )
    return HeterogeneityReport(
        n_clients=len(partitions),
        label_skew=ls_flag,
        max_jsd=max_js,
        feature_skew=fs_flag,
        max_centroid_distance=max_dist,
        outlier_risk=out_flag,
        flag_counts=counts,
        thresholds={
            "label_jsd": label_threshold,
            "feature_distance": feature_threshold,
            "repetitions": repetitions,
            "rep_threshold": rep_threshold,
            "percentile": percentile,
        },
        per_client_jsd=per_client,
        centroid_distances=dist.tolist(),
        entropy_spread=entropy_spread(partitions),
    )
