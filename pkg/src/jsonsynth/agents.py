"""External-role gateway: chat backends (HTTP, scripted replay), the bundled toy
generator, the mechanical judge, and budget accounting.

Every role call goes through a :class:`BudgetMeter`, which checks limits before
anything is sent and is the single point where usage is recorded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import httpx
import numpy as np

from .errors import (
    AgentError,
    BudgetExceeded,
    HttpError,
    Timeout,
    TranscriptExhausted,
    TranscriptMismatch,
)
from .judge import CATEGORIES, JudgeAnswers, mechanical_feedback, render_answers
from .metrics import MetricVector
from .schema import Sample, SchemaSpec, records, validate

log = logging.getLogger(__name__)

BACKOFF_BASE = 0.5
BACKOFF_FACTOR = 2.0


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


# --- budgets ----------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetLimits:
    tokens: int = 1_000_000
    calls: int = 1_000
    iterations: int = 5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")


@dataclass(frozen=True)
class BudgetState:
    limits: BudgetLimits = BudgetLimits()
    tokens_used: int = 0
    calls_used: int = 0
    iterations_used: int = 0

    def as_dict(self) -> dict:
        return {
            "tokens_used": self.tokens_used,
            "calls_used": self.calls_used,
            "iterations_used": self.iterations_used,
            "limits": {"tokens": self.limits.tokens, "calls": self.limits.calls,
                       "iterations": self.limits.iterations},
        }


def charge_budget(state: BudgetState, tokens: int = 0, calls: int = 0, iterations: int = 0) -> BudgetState:
    """Return the charged state; raise BudgetExceeded (state untouched) if any limit would be crossed."""
    if tokens < 0 or calls < 0 or iterations < 0:
        raise ValueError("charges must be non-negative")
    new = replace(state, tokens_used=state.tokens_used + tokens, calls_used=state.calls_used + calls,
                  iterations_used=state.iterations_used + iterations)
    if new.tokens_used > state.limits.tokens:
        raise BudgetExceeded("tokens")
    if new.calls_used > state.limits.calls:
        raise BudgetExceeded("calls")
    if new.iterations_used > state.limits.iterations:
        raise BudgetExceeded("iterations")
    return new


class BudgetMeter:
    def __init__(self, limits: BudgetLimits = BudgetLimits()):
        self.state = BudgetState(limits)

    def reserve(self, tokens: int = 0, calls: int = 1):
        """Pre-flight check; raises without recording anything."""
        charge_budget(self.state, tokens, calls)

    def charge(self, tokens: int = 0, calls: int = 0, iterations: int = 0):
        self.state = charge_budget(self.state, tokens, calls, iterations)


def _meter_or_unlimited(meter: Optional[BudgetMeter]) -> BudgetMeter:
    return meter if meter is not None else BudgetMeter(BudgetLimits(10**18, 10**18, 10**9))


# --- chat backends ------------------------------------------------------------------

@dataclass(frozen=True)
class AgentEndpoint:
    base_url: str
    model_name: str
    temperature: float = 0.7
    max_tokens: int = 1024
    timeout: float = 60.0
    retry_limit: int = 2
    api_key_env: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentEndpoint":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


@dataclass(frozen=True)
class Completion:
    text: str
    tokens: int


class ChatBackend(Protocol):
    def complete(self, messages: list[dict], meter: Optional[BudgetMeter] = None) -> Completion: ...


def messages_digest(messages: Sequence[dict]) -> str:
    return hashlib.sha256(json.dumps(list(messages), sort_keys=True, ensure_ascii=False).encode()).hexdigest()


class HttpChatBackend:
    """Chat-completion-compatible HTTP endpoint with bounded retries."""

    def __init__(self, endpoint: AgentEndpoint, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.sleep = sleep
        self._client = httpx.Client(transport=transport, timeout=endpoint.timeout)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key_env:
            token = os.environ.get(self.endpoint.api_key_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, messages, meter=None):
        meter = _meter_or_unlimited(meter)
        payload = {
            "model": self.endpoint.model_name,
            "messages": list(messages),
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
        }
        prompt_chars = sum(len(m.get("content", "")) for m in messages)
        reservation = estimate_tokens("x" * prompt_chars) + self.endpoint.max_tokens
        attempt = 0
        while True:
            meter.reserve(tokens=reservation, calls=1)
            meter.charge(calls=1)
            try:
                resp = self._client.post(self.endpoint.url, json=payload, headers=self._headers())
            except httpx.TimeoutException as exc:
                error: AgentError = Timeout(f"{self.endpoint.url} timed out: {exc}")
            except httpx.HTTPError as exc:
                raise AgentError(f"transport failure talking to {self.endpoint.url}: {exc}") from exc
            else:
                if resp.status_code < 400:
                    return self._finish(resp, prompt_chars, meter)
                error = HttpError(resp.status_code, resp.text)
                if resp.status_code < 500:
                    raise error
            if attempt >= self.endpoint.retry_limit:
                raise error
            delay = BACKOFF_BASE * BACKOFF_FACTOR ** attempt
            log.warning("retrying %s in %.1fs after %s", self.endpoint.url, delay, error)
            self.sleep(delay)
            attempt += 1

    def _finish(self, resp: httpx.Response, prompt_chars: int, meter: BudgetMeter) -> Completion:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise AgentError(f"malformed chat-completion reply: {exc}") from exc
        usage = body.get("usage") or {}
        if "total_tokens" in usage:
            tokens = int(usage["total_tokens"])
        elif "prompt_tokens" in usage or "completion_tokens" in usage:
            tokens = int(usage.get("prompt_tokens", 0)) + int(usage.get("completion_tokens", 0))
        else:
            tokens = math.ceil((prompt_chars + len(text)) / 4)
        meter.charge(tokens=tokens)
        return Completion(text, tokens)


@dataclass
class ScriptedTranscript:
    entries: list[tuple[Optional[str], str]]
    position: int = 0

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScriptedTranscript":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    doc = json.loads(line)
                    entries.append((doc.get("expected_digest"), doc["reply"]))
        return cls(entries)

    @classmethod
    def from_replies(cls, replies: Sequence[str]) -> "ScriptedTranscript":
        return cls([(None, r) for r in replies])

    def next_reply(self, digest: str) -> str:
        if self.position >= len(self.entries):
            raise TranscriptExhausted(f"transcript has only {len(self.entries)} replies")
        expected, reply = self.entries[self.position]
        if expected is not None and expected != digest:
            raise TranscriptMismatch(f"reply {self.position}: prompt digest {digest[:12]} != {expected[:12]}")
        self.position += 1
        return reply


class ScriptedBackend:
    """Replays a transcript in order; never touches the network."""

    def __init__(self, transcript: ScriptedTranscript):
        self.transcript = transcript

    def complete(self, messages, meter=None):
        meter = _meter_or_unlimited(meter)
        prompt_chars = sum(len(m.get("content", "")) for m in messages)
        meter.reserve(tokens=math.ceil(prompt_chars / 4), calls=1)
        reply = self.transcript.next_reply(messages_digest(messages))
        tokens = math.ceil((prompt_chars + len(reply)) / 4)
        meter.charge(tokens=tokens, calls=1)
        return Completion(reply, tokens)


def complete(backend: ChatBackend, messages: list[dict], meter: Optional[BudgetMeter] = None) -> Completion:
    return backend.complete(messages, meter)


# --- toy generator ---------------------------------------------------------------

ATTRACTION_FIELDS = ("address", "area", "entrance fee", "id", "location", "name",
                     "openhours", "phone", "postcode", "pricerange", "type")
_OPTIONAL_FIELDS = ("entrance fee", "openhours", "pricerange")
_AREAS = ("centre", "north", "south", "east", "west", "northeast", "northwest", "southeast", "southwest")
_STREETS = ("mill road", "castle street", "market hill", "chesterton road", "hills road", "regent street",
            "trumpington street", "newmarket road", "huntingdon road", "histon road", "king street",
            "bridge street", "lensfield road", "mill lane", "cherry hinton road", "station road")
_PREFIXES = ("riverside", "castle", "grand reel", "pine", "bloom", "market", "granta", "kings", "parkside",
             "orchard", "fen", "willow", "harvest", "lantern", "heron", "copper")
_TYPES = (("cafe", "cafe"), ("gym", "fitness hub"), ("cinema", "cinema"), ("library", "library"),
          ("museum", "museum"), ("theatre", "playhouse"), ("park", "gardens"), ("swimmingpool", "pool"),
          ("boat", "punting station"), ("nightclub", "club"))
_FEES = ("?", "?", "?", "free", "5 pounds")
_HOURS = ("?", "?", "?", "daily 09:00 to 17:00")
_PRICES = ("?", "?", "free", "cheap", "moderate", "expensive")
_PROSE_HEAD = "Here are some new venue entries for the dataset:\n\n"
_PROSE_TAIL = "\n\nThese entries follow the format of the examples and can be added directly."
_COUNT_RE = re.compile(r"create\s+(\d+)", re.I)


def toy_generate(prompt_text: str, rng: np.random.Generator) -> str:
    """Emit venue records whose quality responds causally to prompt features.

    * every attraction field named in the prompt: required fields are always
      emitted and optional ones with probability 0.98; otherwise each field is
      emitted with probability 0.6
    * a "unique" directive drops the repeat-previous-name probability from 0.5 to 0.05
    * a "Return ONLY" directive removes the prose that otherwise wraps the JSON
      with probability 0.3
    * "create N" sets the record count (default 3, capped at 10)
    """
    lower = prompt_text.lower()
    listed = all(name in lower for name in ATTRACTION_FIELDS)
    p_dup = 0.05 if "unique" in lower else 0.5
    json_only = "return only" in lower
    m = _COUNT_RE.search(prompt_text)
    count = min(max(int(m.group(1)), 1), 10) if m else 3

    out = []
    for i in range(count):
        type_key, kind = _TYPES[rng.integers(len(_TYPES))]
        name = f"{_PREFIXES[rng.integers(len(_PREFIXES))]} {kind}"
        address = f"{rng.integers(1, 200)} {_STREETS[rng.integers(len(_STREETS))]}"
        if out and rng.random() < p_dup:
            prev = out[-1]
            name = prev.get("name", name)
            address = prev.get("address", address)
        full = {
            "address": address,
            "area": _AREAS[rng.integers(len(_AREAS))],
            "entrance fee": _FEES[rng.integers(len(_FEES))],
            "id": str(3 + i),
            "location": [round(52.185 + 0.035 * rng.random(), 6), round(0.095 + 0.065 * rng.random(), 6)],
            "name": name,
            "openhours": _HOURS[rng.integers(len(_HOURS))],
            "phone": "01223" + "".join(str(d) for d in rng.integers(0, 10, size=6)),
            "postcode": f"cb{rng.integers(1, 6)}{rng.integers(0, 10)}{chr(97 + rng.integers(26))}{chr(97 + rng.integers(26))}",
            "pricerange": _PRICES[rng.integers(len(_PRICES))],
            "type": type_key,
        }
        record = {}
        for key in ATTRACTION_FIELDS:
            draw = rng.random()
            if listed and key not in _OPTIONAL_FIELDS:
                keep = True
            else:
                keep = draw < (0.98 if listed else 0.6)
            if keep:
                record[key] = full[key]
        out.append(record)

    body = json.dumps(out, indent=2, ensure_ascii=False)
    wrap = rng.random() < 0.3
    if not json_only and wrap:
        return _PROSE_HEAD + body + _PROSE_TAIL
    return body


# --- role adapters ------------------------------------------------------------------

@dataclass
class JudgeEvidence:
    """What an in-process judge may look at; chat judges see only the prompt text."""

    samples: list[Sample]
    metrics: MetricVector
    answers: Optional[JudgeAnswers] = None


class ToyGenerator:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def generate(self, prompt_text: str, meter: Optional[BudgetMeter] = None) -> str:
        meter = _meter_or_unlimited(meter)
        meter.reserve(tokens=estimate_tokens(prompt_text), calls=1)
        text = toy_generate(prompt_text, self.rng)
        meter.charge(tokens=estimate_tokens(prompt_text + text), calls=1)
        return text


class ChatGenerator:
    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def generate(self, prompt_text: str, meter: Optional[BudgetMeter] = None) -> str:
        return self.backend.complete([{"role": "user", "content": prompt_text}], meter).text


class ChatJudge:
    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def answer(self, judge_prompt: str, evidence: JudgeEvidence, meter: Optional[BudgetMeter] = None) -> str:
        return self.backend.complete([{"role": "user", "content": judge_prompt}], meter).text

    def feedback(self, reward_prompt: str, evidence: JudgeEvidence, meter: Optional[BudgetMeter] = None) -> str:
        return self.backend.complete([{"role": "user", "content": reward_prompt}], meter).text


_UNSAFE_TERMS = ("hate", "kill", "slur", "racist", "violent")


@dataclass
class MechanicalJudge:
    """Answers the rubric from measurable evidence instead of an LLM.

    Task Alignment: the sample parses to at least one JSON object.
    Semantic Fidelity: similarity to the references reaches ``sim_threshold``.
    Diversity & Novelty: no repeated record names and novelty reaches ``novelty_threshold``.
    Fluency & Grammar: perplexity at most ``ppl_threshold``.
    Structure & JSON Validity: schema-valid and nothing but JSON in the reply.
    Usefulness / Utility: valid and every schema field present in every record.
    Bias / Safety: YES only when a blocklisted term appears.
    """

    schema: SchemaSpec
    sim_threshold: float = 0.6
    novelty_threshold: float = 0.1
    ppl_threshold: float = 40.0
    unsafe_terms: tuple[str, ...] = _UNSAFE_TERMS

    def decide(self, evidence: JudgeEvidence) -> JudgeAnswers:
        recs = [r for s in evidence.samples if s.parsed for r in records(s.json_value)]
        objects = [r for r in recs if isinstance(r, dict)]
        valid = bool(evidence.samples) and all(s.parsed and validate(s.json_value, self.schema)
                                               for s in evidence.samples)
        names = [r.get("name") for r in objects if "name" in r]
        pure_json = all(s.raw_text.strip()[:1] in "[{" and s.raw_text.strip()[-1:] in "]}"
                        for s in evidence.samples)
        complete = valid and all(all(f in r for f in self.schema.top_level_keys) for r in objects)
        text = " ".join(s.raw_text.lower() for s in evidence.samples)
        m = evidence.metrics
        verdict = {
            "Task Alignment": bool(objects),
            "Semantic Fidelity": m.sim >= self.sim_threshold,
            "Diversity & Novelty": len(names) == len(set(names)) and m.novelty >= self.novelty_threshold,
            "Fluency & Grammar": m.perplexity <= self.ppl_threshold,
            "Structure & JSON Validity": valid and pure_json,
            "Usefulness / Utility": complete,
            "Bias / Safety": any(re.search(rf"\b{t}\b", text) for t in self.unsafe_terms),
        }
        return JudgeAnswers({c: verdict[c] for c in CATEGORIES})

    def answer(self, judge_prompt: str, evidence: JudgeEvidence, meter: Optional[BudgetMeter] = None) -> str:
        meter = _meter_or_unlimited(meter)
        meter.reserve(tokens=estimate_tokens(judge_prompt), calls=1)
        text = render_answers(self.decide(evidence))
        meter.charge(tokens=estimate_tokens(judge_prompt + text), calls=1)
        return text

    def feedback(self, reward_prompt: str, evidence: JudgeEvidence, meter: Optional[BudgetMeter] = None) -> str:
        meter = _meter_or_unlimited(meter)
        meter.reserve(tokens=estimate_tokens(reward_prompt), calls=1)
        answers = evidence.answers if evidence.answers is not None else self.decide(evidence)
        text = mechanical_feedback(answers)
        meter.charge(tokens=estimate_tokens(reward_prompt + text), calls=1)
        return text


class ChatOptimizer:
    """External rewriting agent: returns a whole new prompt plus its performance prediction."""

    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def propose(self, optimizer_prompt: str, meter: Optional[BudgetMeter] = None) -> str:
        return self.backend.complete([{"role": "user", "content": optimizer_prompt}], meter).text
