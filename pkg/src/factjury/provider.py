"""Model-provider abstraction.

Backends speak a generic chat-completion wire shape (messages array plus a
model field) so vendor differences stay inside one adapter. A deterministic
replay backend answers requests from a fixture keyed by a canonical request
fingerprint, which is what every offline test and the end-to-end pipeline run
against.

Costs use exact decimal arithmetic throughout; rounding (half-even, six
decimal places) happens once, at the end of a sum, never per call.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from .errors import (
    InvariantViolation,
    NonRetryable,
    ProviderExhausted,
    UnpricedModel,
    UnscriptedRequest,
)

GENERATION_TEMPERATURE = 0.2
JUDGE_TEMPERATURE = 0.0

_CENTS_6 = Decimal("0.000001")
_KILO = Decimal(1000)


class TransientProviderError(Exception):
    """Retryable failure: timeout, rate limit, or server-side error."""


# --- request / response records ---------------------------------------------------

@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_prompt: str
    max_output_tokens: int = 1024
    temperature: float = JUDGE_TEMPERATURE

    def validate(self) -> None:
        if not self.model_id:
            raise InvariantViolation("request model_id must be non-empty")
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise InvariantViolation("request prompts must be non-empty", model_id=self.model_id)
        if not (0.0 <= self.temperature <= 2.0):
            raise InvariantViolation(
                f"temperature {self.temperature} outside [0, 2]", model_id=self.model_id
            )
        if self.max_output_tokens <= 0:
            raise InvariantViolation("max_output_tokens must be positive", model_id=self.model_id)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens_in: int
    tokens_out: int
    latency_s: Decimal
    provider_id: str
    # which model produced the text; cost attribution keys on this
    model_id: str

    def validate(self) -> None:
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise InvariantViolation("token counts must be nonnegative")
        if self.latency_s < 0:
            raise InvariantViolation("latency must be nonnegative")


def request_fingerprint(request: ChatRequest) -> str:
    """Stable id of a request: SHA-256 over the canonical JSON serialization
    of (model_id, system_prompt, user_prompt). Platform-independent."""
    canonical = json.dumps(
        {
            "model_id": request.model_id,
            "system_prompt": request.system_prompt,
            "user_prompt": request.user_prompt,
        },
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- pricing -----------------------------------------------------------------------

@dataclass(frozen=True)
class PriceTable:
    """Per-model prices in USD per 1000 tokens, (input, output)."""

    prices: dict[str, tuple[Decimal, Decimal]]

    @classmethod
    def from_mapping(cls, raw: dict) -> "PriceTable":
        prices: dict[str, tuple[Decimal, Decimal]] = {}
        for model_id, pair in raw.items():
            if isinstance(pair, dict):
                pin, pout = pair.get("usd_per_1k_tokens_in"), pair.get("usd_per_1k_tokens_out")
            else:
                pin, pout = pair
            if pin is None or pout is None:
                raise InvariantViolation(f"price entry for {model_id} is incomplete")
            pin_d, pout_d = Decimal(str(pin)), Decimal(str(pout))
            if pin_d < 0 or pout_d < 0:
                raise InvariantViolation(f"negative price for {model_id}")
            prices[model_id] = (pin_d, pout_d)
        return cls(prices=prices)

    def lookup(self, model_id: str) -> tuple[Decimal, Decimal]:
        try:
            return self.prices[model_id]
        except KeyError:
            raise UnpricedModel(f"no price configured for model {model_id}",
                                model_id=model_id) from None


def estimate_cost(responses: Iterable[ChatResponse], prices: PriceTable) -> Decimal:
    """Sum of per-call costs, exact until a single final half-even rounding
    to six decimal places."""
    total = Decimal(0)
    for r in responses:
        pin, pout = prices.lookup(r.model_id)
        total += (Decimal(r.tokens_in) / _KILO) * pin + (Decimal(r.tokens_out) / _KILO) * pout
    return total.quantize(_CENTS_6, rounding=ROUND_HALF_EVEN)


# --- metering ----------------------------------------------------------------------

@dataclass
class CallMeter:
    """Contention-safe accumulator of everything the run spent."""

    responses: list[ChatResponse] = field(default_factory=list)
    n_attempts: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, response: ChatResponse, attempts: int) -> None:
        with self._lock:
            self.responses.append(response)
            self.n_attempts += attempts

    @property
    def n_calls(self) -> int:
        return len(self.responses)

    @property
    def tokens_in(self) -> int:
        return sum(r.tokens_in for r in self.responses)

    @property
    def tokens_out(self) -> int:
        return sum(r.tokens_out for r in self.responses)

    @property
    def latency_s(self) -> Decimal:
        return sum((r.latency_s for r in self.responses), Decimal(0))

    def total_cost(self, prices: PriceTable) -> Decimal:
        return estimate_cost(self.responses, prices)


# --- backends ----------------------------------------------------------------------

class Backend(Protocol):
    provider_id: str

    def send(self, request: ChatRequest) -> ChatResponse: ...


class ReplayBackend:
    """Answers from a fingerprint-keyed script; a pure function of the request.

    Script records carry text plus provider-reported token counts:
    ``{fingerprint: {"text": ..., "tokens_in": ..., "tokens_out": ...}}``.
    """

    provider_id = "replay"

    def __init__(self, script: dict[str, dict]):
        self.script = dict(script)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise InvariantViolation("replay fixture must be a JSON object", file=str(path))
        script = doc.get("responses", doc)
        script.pop("schema_version", None)
        return cls(script)

    def send(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        fp = request_fingerprint(request)
        record = self.script.get(fp)
        if record is None:
            raise UnscriptedRequest(
                f"no scripted response for fingerprint {fp}",
                fingerprint=fp,
                model_id=request.model_id,
                prompt_head=request.user_prompt[:200],
            )
        return ChatResponse(
            text=record["text"],
            tokens_in=int(record.get("tokens_in", 0)),
            tokens_out=int(record.get("tokens_out", 0)),
            latency_s=Decimal(str(record.get("latency_s", "0"))),
            provider_id=self.provider_id,
            model_id=request.model_id,
        )


class HttpBackend:
    """Generic chat-completion endpoint over HTTP.

    POSTs ``{model, messages, max_tokens, temperature}`` to
    ``<base_url>/chat/completions`` and reads the first choice plus usage
    counts. Token counts come from the provider, never a local tokenizer.
    Timeouts, 429s and 5xx responses are retryable; other 4xx are not.
    """

    def __init__(self, provider_id: str, base_url: str, api_key: str = "",
                 timeout_s: float = 60.0, session=None):
        import requests  # deferred so offline use never needs it

        self.provider_id = provider_id
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def send(self, request: ChatRequest) -> ChatResponse:
        import requests

        request.validate()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }
        started = time.perf_counter()
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload, headers=headers, timeout=self.timeout_s,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientProviderError(f"transport failure: {exc}") from exc
        elapsed = time.perf_counter() - started

        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"provider returned {resp.status_code}")
        if resp.status_code >= 400:
            raise NonRetryable(
                f"provider rejected the request with {resp.status_code}",
                provider_id=self.provider_id, status=resp.status_code,
            )
        try:
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"]
            usage = doc.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise NonRetryable(
                f"provider payload missing expected fields: {exc}",
                provider_id=self.provider_id,
            ) from None
        return ChatResponse(
            text=text,
            tokens_in=int(usage.get("prompt_tokens", 0)),
            tokens_out=int(usage.get("completion_tokens", 0)),
            latency_s=Decimal(str(round(elapsed, 6))),
            provider_id=self.provider_id,
            model_id=request.model_id,
        )


# --- retry and routing ---------------------------------------------------------------

@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay_s: float = 0.5
    max_delay_s: float = 8.0

    def nominal_delay(self, attempt: int) -> float:
        """Pre-jitter delay after the given 1-based failed attempt.
        Doubles each attempt, capped; non-decreasing by construction."""
        return min(self.max_delay_s, self.base_delay_s * (2.0 ** (attempt - 1)))


def complete(
    request: ChatRequest,
    backend: Backend,
    policy: RetryPolicy = RetryPolicy(),
    meter: Optional[CallMeter] = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: Optional[random.Random] = None,
) -> ChatResponse:
    """Send a request, retrying transient failures with exponential backoff
    and full jitter (sleep uniform in [0, nominal]). Non-retryable failures
    surface immediately; exhausted attempts raise ProviderExhausted."""
    request.validate()
    rng = rng or random.Random()
    last: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            response = backend.send(request)
        except TransientProviderError as exc:
            last = exc
            if attempt < policy.max_attempts:
                sleep(rng.uniform(0.0, policy.nominal_delay(attempt)))
            continue
        response.validate()
        if meter is not None:
            meter.record(response, attempts=attempt)
        return response
    raise ProviderExhausted(
        f"gave up after {policy.max_attempts} attempts: {last}",
        model_id=request.model_id,
        attempts=policy.max_attempts,
    )


class ProviderRouter:
    """Maps model ids to backends and bounds in-flight requests per backend."""

    def __init__(self, max_in_flight: int = 4):
        self._backends: dict[str, Backend] = {}
        self._models: dict[str, str] = {}
        self._gates: dict[str, threading.BoundedSemaphore] = {}
        self._max_in_flight = max_in_flight
        self.meter = CallMeter()

    def register(self, backend: Backend, model_ids: Iterable[str]) -> None:
        self._backends[backend.provider_id] = backend
        self._gates.setdefault(backend.provider_id, threading.BoundedSemaphore(self._max_in_flight))
        for model_id in model_ids:
            self._models[model_id] = backend.provider_id

    def backend_for(self, model_id: str) -> Backend:
        provider_id = self._models.get(model_id)
        if provider_id is None:
            raise NonRetryable(f"model {model_id} is not registered with any backend",
                               model_id=model_id)
        return self._backends[provider_id]

    def complete(self, request: ChatRequest, policy: RetryPolicy = RetryPolicy(),
                 sleep: Callable[[float], None] = time.sleep,
                 rng: Optional[random.Random] = None) -> ChatResponse:
        backend = self.backend_for(request.model_id)
        with self._gates[backend.provider_id]:
            return complete(request, backend, policy=policy, meter=self.meter,
                            sleep=sleep, rng=rng)


__all__ = [
    "GENERATION_TEMPERATURE", "JUDGE_TEMPERATURE",
    "ChatRequest", "ChatResponse", "PriceTable", "RetryPolicy",
    "TransientProviderError", "CallMeter",
    "Backend", "ReplayBackend", "HttpBackend", "ProviderRouter",
    "request_fingerprint", "estimate_cost", "complete",
]
