"""Aggregation strategies, their parameter schema, and config validation.

A ``StrategyConfig`` is a strategy name plus a flat parameter map. Its
canonical text form is a single-quoted dict literal with ``strategy_name``
first and the remaining keys sorted, e.g.
``{'strategy_name': 'fed_prox', 'proximal_mu': 0.7}``.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from fedsel.model import ClientUpdate, ModelParams

STRATEGY_NAMES = ("fed_avg", "fed_prox", "fed_trimmed_avg", "fed_median", "krum")
DECIMALS = 4


# ---------------------------------------------------------------------------
# errors


class ConfigError(ValueError):
    """Base class for every way a strategy config can be rejected."""


class UnparseableConfig(ConfigError):
    pass


class UnknownStrategy(ConfigError):
    pass


class UnknownParameter(ConfigError):
    pass


class MissingParameter(ConfigError):
    pass


class OutOfDomain(ConfigError):
    pass


class InfeasibleForN(ConfigError):
    pass


# ---------------------------------------------------------------------------
# schema


Bound = int | float | str  # a str bound is "n" or "n-<k>", resolved against the client count


def resolve_bound(bound: Bound, n_clients: int) -> int | float:
    if not isinstance(bound, str):
        return bound
    m = re.fullmatch(r"\s*n\s*(?:([+-])\s*(\d+))?\s*", bound)
    if not m:
        raise ValueError(f"bad bound expression {bound!r}")
    off = int(m.group(2) or 0)
    return n_clients + off if m.group(1) == "+" else n_clients - off


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # "int" or "real"
    low: Bound
    high: Bound
    default: Bound

    def domain(self, n_clients: int) -> tuple[int | float, int | float]:
        return resolve_bound(self.low, n_clients), resolve_bound(self.high, n_clients)


@dataclass(frozen=True)
class StrategySchema:
    strategies: dict[str, tuple[ParamSpec, ...]]

    def params_for(self, name: str) -> tuple[ParamSpec, ...]:
        try:
            return self.strategies[name]
        except KeyError:
            raise UnknownStrategy(
                f"unknown strategy {name!r}; allowed: {', '.join(self.strategies)}"
            ) from None

    def feasible(self, name: str, n_clients: int) -> bool:
        return all(lo <= hi for lo, hi in (p.domain(n_clients) for p in self.params_for(name)))

    def defaults(self, name: str, n_clients: int) -> "StrategyConfig":
        params = {}
        for p in self.params_for(name):
            lo, hi = p.domain(n_clients)
            params[p.name] = min(max(resolve_bound(p.default, n_clients), lo), hi)
        return StrategyConfig(name, params).canonical(self)

    def to_dict(self) -> dict[str, list[dict[str, Any]]]:
        return {
            name: [
                {"name": p.name, "type": p.kind, "min": p.low, "max": p.high, "default": p.default}
                for p in specs
            ]
            for name, specs in self.strategies.items()
        }

    def render(self) -> str:
        """Compact listing embedded into the advisor's system prompt."""
        lines = []
        for name, specs in self.strategies.items():
            if not specs:
                lines.append(f"- {name}: no parameters")
                continue
            parts = [
                f"{p.name} ({p.kind} in [{p.low}, {p.high}], default {p.default})" for p in specs
            ]
            lines.append(f"- {name}: " + "; ".join(parts))
        lines.append("where n is the number of client devices.")
        return "\n".join(lines)


def default_schema() -> StrategySchema:
    return StrategySchema(
        {
            "fed_avg": (),
            "fed_prox": (ParamSpec("proximal_mu", "real", 0.0, 1.0, 0.1),),
            "fed_trimmed_avg": (ParamSpec("beta", "real", 0.0, 0.49, 0.2),),
            "fed_median": (),
            "krum": (
                ParamSpec("num_malicious_clients", "int", 0, "n-3", 1),
                ParamSpec("num_clients_to_keep", "int", 1, "n", "n-1"),
            ),
        }
    )


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class StrategyConfig:
    strategy_name: str
    params: Mapping[str, int | float] = field(default_factory=dict)

    def canonical(self, schema: StrategySchema | None = None) -> "StrategyConfig":
        kinds = {}
        if schema is not None and self.strategy_name in schema.strategies:
            kinds = {p.name: p.kind for p in schema.strategies[self.strategy_name]}
        out = {}
        for k in sorted(self.params):
            v = self.params[k]
            if kinds.get(k) == "int" or (not kinds and isinstance(v, (int, np.integer))):
                out[k] = int(v)
            else:
                out[k] = round(float(v), DECIMALS) + 0.0  # +0.0 folds -0.0
        return StrategyConfig(self.strategy_name, out)

    def to_dict(self) -> dict[str, Any]:
        return {"strategy_name": self.strategy_name, **self.params}

    def to_text(self) -> str:
        items = [f"'strategy_name': '{self.strategy_name}'"]
        items += [f"'{k}': {self.params[k]!r}" for k in sorted(self.params)]
        return "{" + ", ".join(items) + "}"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def __str__(self) -> str:
        return self.to_text()


_FENCE = re.compile(r"```[a-zA-Z]*")
_SMART_QUOTES = str.maketrans({"‘": "'", "’": "'", "“": '"', "”": '"', "`": "'"})


def _literal(snippet: str) -> Any:
    try:
        return ast.literal_eval(snippet)
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        pass
    try:
        return json.loads(snippet)
    except ValueError:
        return None


def parse_config_text(text: str) -> StrategyConfig:
    """Extract the first well-formed dict literal from a free-form response.

    Accepts Python-style single-quoted literals and JSON, with or without code
    fences around them. The result is not validated against any schema.
    """
    if not isinstance(text, str):
        raise UnparseableConfig(f"expected text, got {type(text).__name__}")
    cleaned = _FENCE.sub("", text).translate(_SMART_QUOTES)
    opens = [i for i, c in enumerate(cleaned) if c == "{"]
    closes = [i for i, c in enumerate(cleaned) if c == "}"]
    for i in opens:
        for j in closes:
            if j <= i:
                continue
            value = _literal(cleaned[i : j + 1])
            if isinstance(value, dict):
                return config_from_mapping(value)
    snippet = text.strip().replace("\n", " ")
    raise UnparseableConfig(f"no configuration literal found in response: {snippet[:120]!r}")


def config_from_mapping(value: Mapping[str, Any]) -> StrategyConfig:
    if "strategy_name" not in value:
        raise UnparseableConfig("configuration has no 'strategy_name' key")
    name = value["strategy_name"]
    if not isinstance(name, str):
        raise UnparseableConfig(f"strategy_name must be a string, got {name!r}")
    return StrategyConfig(name, {k: v for k, v in value.items() if k != "strategy_name"})


def _coerce(spec: ParamSpec, value: Any) -> int | float:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise OutOfDomain(f"parameter {spec.name!r} must be a number, got {value!r}")
    if not np.isfinite(value):
        raise OutOfDomain(f"parameter {spec.name!r} is not finite")
    if spec.kind == "int":
        if float(value) != int(value):
            raise OutOfDomain(f"parameter {spec.name!r} must be an integer, got {value!r}")
        return int(value)
    return round(float(value), DECIMALS) + 0.0


def validate_config(
    config: str | Mapping[str, Any] | StrategyConfig,
    schema: StrategySchema,
    n_clients: int,
) -> StrategyConfig:
    """Parse if needed, check against ``schema`` for ``n_clients``, and canonicalize."""
    if isinstance(config, str):
        config = parse_config_text(config)
    elif not isinstance(config, StrategyConfig):
        config = config_from_mapping(config)
    specs = schema.params_for(config.strategy_name)
    known = {p.name for p in specs}
    extra = sorted(set(config.params) - known)
    if extra:
        raise UnknownParameter(
            f"unknown parameter(s) {', '.join(map(repr, extra))} for {config.strategy_name}"
        )
    missing = [p.name for p in specs if p.name not in config.params]
    if missing:
        raise MissingParameter(
            f"missing parameter(s) {', '.join(map(repr, missing))} for {config.strategy_name}"
        )

    params = {p.name: _coerce(p, config.params[p.name]) for p in specs}
    if config.strategy_name == "krum":
        f = params["num_malicious_clients"]
        if n_clients - f - 2 < 1:
            raise InfeasibleForN(
                f"krum needs n - f - 2 >= 1; got n={n_clients}, num_malicious_clients={f}"
            )
    for p in specs:
        value = params[p.name]
        lo, hi = p.domain(n_clients)
        if lo > hi:
            raise InfeasibleForN(
                f"{config.strategy_name} is infeasible with {n_clients} clients: "
                f"{p.name} domain [{p.low}, {p.high}] resolves to empty [{lo}, {hi}]"
            )
        if not lo <= value <= hi:
            raise OutOfDomain(
                f"{p.name}={value} outside [{lo}, {hi}] for {config.strategy_name}"
                f" with n={n_clients}"
            )

    if config.strategy_name == "fed_trimmed_avg":
        if n_clients - 2 * int(np.floor(params["beta"] * n_clients)) < 1:
            raise InfeasibleForN(f"beta={params['beta']} trims every one of {n_clients} clients")
    return StrategyConfig(config.strategy_name, dict(sorted(params.items())))


# ---------------------------------------------------------------------------
# aggregation


def _stack(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return np.stack([u.params.flat() for u in updates])


def weighted_mean(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-weighted mean, pivoted on the first update.

    ``x0 + sum(w * (x - x0)) / W`` equals the usual weighted mean but returns
    identical inputs bit for bit. The sum runs in the given order rather than
    through a BLAS product, whose summation order varies across platforms.
    """
    pivot = updates[0].params.flat()
    total = 0
    acc = np.zeros_like(pivot)
    for u in updates:
        acc += float(u.num_examples) * (u.params.flat() - pivot)
        total += u.num_examples
    return pivot + acc / float(total)


def coordinate_median(mat: np.ndarray) -> np.ndarray:
    return np.median(mat, axis=0)


def trimmed_mean(mat: np.ndarray, beta: float) -> np.ndarray:
    n = mat.shape[0]
    k = int(np.floor(beta * n))
    if n - 2 * k < 1:
        raise InfeasibleForN(f"beta={beta} trims all {n} updates")
    s = np.sort(mat, axis=0)
    return s[k : n - k].mean(axis=0)


def krum_scores(mat: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - f - 2`` nearest other rows."""
    n = mat.shape[0]
    m = n - f - 2
    if m < 1:
        raise InfeasibleForN(f"krum needs n - f - 2 >= 1 (n={n}, f={f})")
    d2 = np.array([np.sum((mat - row) ** 2, axis=1) for row in mat])
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :m].sum(axis=1)


def krum_select(mat: np.ndarray, f: int, keep: int) -> np.ndarray:
    """Indices of the ``keep`` lowest-scoring rows; ties go to the lower index."""
    n = mat.shape[0]
    if not 1 <= keep <= n:
        raise InfeasibleForN(f"num_clients_to_keep={keep} outside [1, {n}]")
    scores = krum_scores(mat, f)
    return np.argsort(scores, kind="stable")[:keep]


def aggregate(
    config: StrategyConfig, updates: Sequence[ClientUpdate], global_params: ModelParams
) -> ModelParams:
    """Combine client updates into the next global model.

    Updates are ordered by ``client_id`` first so the result does not depend on
    arrival order.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    for u in updates:
        if not u.params.same_shape(global_params):
            raise ValueError(f"client {u.client_id} update shape does not match the global model")
    name, p = config.strategy_name, config.params
    if name in ("fed_avg", "fed_prox"):
        vec = weighted_mean(updates)
    elif name == "fed_median":
        vec = coordinate_median(_stack(updates))
    elif name == "fed_trimmed_avg":
        vec = trimmed_mean(_stack(updates), float(p["beta"]))
    elif name == "krum":
        mat = _stack(updates)
        keep = krum_select(mat, int(p["num_malicious_clients"]), int(p["num_clients_to_keep"]))
        vec = weighted_mean([updates[i] for i in sorted(keep)])
    else:
        raise UnknownStrategy(f"unknown strategy {name!r}")
    return ModelParams.from_flat(global_params.sizes, vec)


def client_proximal_mu(config: StrategyConfig) -> float:
    return float(config.params.get("proximal_mu", 0.0)) if config.strategy_name == "fed_prox" else 0.0
