"""Single-trial strategy recommendation through a text-completion backend.

The backend sees a fixed system prompt (embedding the strategy schema and four
example outputs) and a short user prompt carrying the three heterogeneity
flags. Responses are parsed and validated; invalid ones are retried with a
corrective message, at most three attempts in total.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx

from fedsel.detect import HeterogeneityReport
from fedsel.strategies import (
    ConfigError,
    StrategyConfig,
    StrategySchema,
    parse_config_text,
    validate_config,
)

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
MAX_TRANSPORT_ATTEMPTS = 3
API_KEY_ENV = "FEDSEL_LLM_API_KEY"

SYSTEM_TEMPLATE = """\
You are an expert in Federated Learning who helps users decide their FL strategy and associated parameters based on the data heterogeneity they describe.

Your ultimate goal is to generate a configuration that orchestrates an FL workflow with optimal predictive performance for the given heterogeneity scenario.

Return format: You must return only a valid configuration in Python dictionary format.

Allowed Schema: {schema}

Return only a single Python dictionary - no explanations, no extra text.

Examples of valid output:
{{'strategy_name': 'fed_avg'}}
{{'strategy_name': 'fed_prox', 'proximal_mu': 0.7}}
{{'strategy_name': 'fed_trimmed_avg', 'beta': 0.3}}
{{'strategy_name': 'krum', 'num_malicious_clients': 1, 'num_clients_to_keep': 3}}

Your output must be a valid Python dictionary using single quotes."""

USER_TEMPLATE = """\
I have {n} client devices and I've run some EDA on the risks of label skew, feature skew, and weight divergence which may indicate risks of malicious behaviour.

Below are the results:
{flags}"""

DESCRIBE_TEMPLATE = "I have {n} client devices. {description}"


class AdvisorError(RuntimeError):
    pass


class TransportError(AdvisorError):
    """The backend could not be reached or returned an unusable HTTP response."""


class RetriesExhausted(AdvisorError):
    def __init__(self, message: str, raw_responses: Sequence[str], errors: Sequence[str]):
        super().__init__(message)
        self.raw_responses = list(raw_responses)
        self.errors = list(errors)


@dataclass(frozen=True)
class PromptPair:
    system: str
    user: str


@dataclass
class AdvisorOutcome:
    config: StrategyConfig
    attempts: int
    raw_responses: list[str] = field(default_factory=list)


class CompletionBackend(Protocol):
    def complete(self, system: str, user: str) -> str: ...


# ---------------------------------------------------------------------------
# prompts


def build_prompts(report: HeterogeneityReport, schema: StrategySchema, n_clients: int) -> PromptPair:
    system = SYSTEM_TEMPLATE.format(schema="\n" + schema.render())
    user = USER_TEMPLATE.format(n=n_clients, flags=report.format_b())
    return PromptPair(system, user)


def build_described_prompts(description: str, schema: StrategySchema, n_clients: int) -> PromptPair:
    """Human-in-the-loop variant: free text replaces the detected flags."""
    system = SYSTEM_TEMPLATE.format(schema="\n" + schema.render())
    return PromptPair(system, DESCRIBE_TEMPLATE.format(n=n_clients, description=description.strip()))


def corrective_message(error: Exception) -> str:
    return (
        f"Your previous answer was rejected: {error}. "
        "Reply again with only a single valid Python dictionary that follows the allowed schema."
    )


# ---------------------------------------------------------------------------
# backends


_FLAG_RE = re.compile(r"^(Label Skew|Feature Skew|Outlier Risk):\s*(Yes|No)\s*$", re.M)
_N_RE = re.compile(r"I have (\d+) client devices")


def rule_mock(report: HeterogeneityReport) -> str:
    """Offline stand-in for the language model: a fixed priority table over the flags."""
    return _rule_text(report.label_skew, report.feature_skew, report.outlier_risk, report.n_clients)


def _rule_text(label_skew: bool, feature_skew: bool, outlier_risk: bool, n: int) -> str:
    if outlier_risk and n >= 3:
        # f = 1 where the client count allows it (n - f - 2 >= 1)
        cfg = StrategyConfig("krum", {"num_malicious_clients": min(1, n - 3), "num_clients_to_keep": n - 1})
    elif outlier_risk:
        cfg = StrategyConfig("fed_median", {})
    elif label_skew:
        cfg = StrategyConfig("fed_prox", {"proximal_mu": 0.1})
    elif feature_skew:
        cfg = StrategyConfig("fed_trimmed_avg", {"beta": 0.2})
    else:
        cfg = StrategyConfig("fed_avg", {})
    return cfg.to_text()


class RuleMockBackend:
    """Reads the flags back out of the user prompt and answers with ``rule_mock``'s table.

    Free-text prompts without flags get ``fed_avg``.
    """

    def complete(self, system: str, user: str) -> str:
        flags = {k: v == "Yes" for k, v in _FLAG_RE.findall(user)}
        m = _N_RE.search(user)
        n = int(m.group(1)) if m else 4
        return _rule_text(
            flags.get("Label Skew", False),
            flags.get("Feature Skew", False),
            flags.get("Outlier Risk", False),
            n,
        )


class ScriptedBackend:
    """Replays canned responses in order; an ``Exception`` entry is raised instead."""

    def __init__(self, responses: Sequence[str | Exception]):
        self.responses = list(responses)
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        if not self.responses:
            raise AdvisorError("scripted backend ran out of responses")
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """One response per line of a JSON list, or per non-empty line of plain text."""
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except ValueError:
            data = [line for line in text.splitlines() if line.strip()]
        if not isinstance(data, list):
            raise ValueError(f"{path}: expected a list of responses")
        return cls([str(x) for x in data])


class HttpChatBackend:
    """OpenAI-style chat completion endpoint (``POST {base_url}/chat/completions``)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        timeout: float = 60.0,
        api_key: str | None = None,
        transcript: Path | None = None,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.transcript = transcript
        self.backoff = backoff
        self._client = client
        self.history: list[dict[str, str]] = []

    def _log(self, record: dict[str, Any]) -> None:
        if self.transcript is None:
            return
        text = json.dumps(record)
        if self.api_key:
            text = text.replace(self.api_key, "[REDACTED]")
        with self.transcript.open("a", encoding="utf-8") as fh:
            fh.write(text + "\n")

    def complete(self, system: str, user: str) -> str:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = f"{self.base_url}/chat/completions"
        last: Exception | None = None
        for attempt in range(MAX_TRANSPORT_ATTEMPTS):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self._log({"event": "request", "url": url, "body": body, "attempt": attempt + 1})
            try:
                client = self._client or httpx.Client(timeout=self.timeout)
                try:
                    resp = client.post(url, json=body, headers=headers)
                finally:
                    if self._client is None:
                        client.close()
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
                self._log({"event": "transport_error", "error": str(exc), "attempt": attempt + 1})
                log.warning("backend request failed (attempt %d): %s", attempt + 1, exc)
                continue
            self._log({"event": "response", "content": content})
            return content
        raise TransportError(f"backend unreachable after {MAX_TRANSPORT_ATTEMPTS} attempts: {last}")


# ---------------------------------------------------------------------------
# recommendation loop


def recommend(
    report: HeterogeneityReport | None,
    schema: StrategySchema,
    n_clients: int,
    backend: CompletionBackend,
    prompts: PromptPair | None = None,
    on_exchange: Callable[[dict[str, Any]], None] | None = None,
) -> AdvisorOutcome:
    """Ask ``backend`` for a config until one validates, at most three times.

    Transport failures propagate as ``TransportError``; three invalid answers
    raise ``RetriesExhausted`` carrying every raw response.
    """
    if prompts is None:
        if report is None:
            raise ValueError("need a report or explicit prompts")
        prompts = build_prompts(report, schema, n_clients)
    user = prompts.user
    raw: list[str] = []
    errors: list[str] = []
    for attempt in range(1, MAX_ATTEMPTS + 1):
        text = backend.complete(prompts.system, user)
        raw.append(text)
        try:
            config = validate_config(parse_config_text(text), schema, n_clients)
        except ConfigError as exc:
            errors.append(f"{type(exc).__name__}: {exc}")
            if on_exchange:
                on_exchange({"attempt": attempt, "user": user, "response": text, "error": errors[-1]})
            log.info("advisor attempt %d rejected: %s", attempt, exc)
            user = f"{prompts.user}\n\n{corrective_message(exc)}"
            continue
        if on_exchange:
            on_exchange({"attempt": attempt, "user": user, "response": text, "config": config.to_text()})
        return AdvisorOutcome(config, attempt, raw)
    raise RetriesExhausted(
        f"no valid configuration after {MAX_ATTEMPTS} attempts; last error: {errors[-1]}",
        raw,
        errors,
    )
