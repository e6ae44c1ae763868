"""Chat-completion endpoints, option selection, caching and scripted respondents.

An answer is the valid option letter the model scores highest.  Endpoints are
queried with the best method they support: returned token scores at the answer
position, then per-option forced continuations, then temperature-0 generation
with a parser.  Every upstream payload is handed to the optional ``sink``
before it is interpreted.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import math
import os
import re
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

from .perspective import PromptBundle, format_messages
from .questionnaire import Questionnaire, ScoringRule

log = logging.getLogger(__name__)

__all__ = [
    "Method",
    "ClientError",
    "UnsupportedError",
    "TransportError",
    "Refusal",
    "CacheCorruption",
    "EndpointProfile",
    "SelectionResult",
    "ChatClient",
    "TokenBucket",
    "CacheStore",
    "ScriptedRespondent",
    "parse_answer",
    "select_option",
    "cache_key",
    "run_with_cache",
]

API_KEY_PREFIX = "PERSONA_PROBE_API_KEY_"


class Method(str, enum.Enum):
    TOKEN_SCORES = "token_scores"
    PER_OPTION_CONTINUATION = "per_option_continuation"
    GENERATE_AND_MATCH = "generate_and_match"
    SCRIPTED = "scripted"


class ClientError(RuntimeError):
    pass


class UnsupportedError(ClientError):
    pass


class TransportError(ClientError):
    pass


class Refusal(ClientError):
    """The model produced no valid option."""

    def __init__(self, message: str, raw_payload: bytes = b"", method: Method | None = None):
        super().__init__(message)
        self.raw_payload = raw_payload
        self.method = method


class CacheCorruption(ClientError):
    pass


@dataclass(frozen=True)
class EndpointProfile:
    id: str
    base_url: str
    model_name: str
    supports_system_role: bool = True
    supports_token_scores: bool = False
    supports_continuation_scores: bool = False
    supports_generation: bool = True
    # Name of the environment variable holding the key; defaults to
    # PERSONA_PROBE_API_KEY_<ID>.
    auth_ref: str | None = None
    rate_limit: float = 60.0  # requests per minute
    timeout: float = 60.0
    max_attempts: int = 4
    backoff_base: float = 1.0
    top_logprobs: int = 20
    max_workers: int = 4

    def __post_init__(self) -> None:
        if not self.rate_limit > 0:
            raise ValueError("rate_limit must be > 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @property
    def credential_env(self) -> str:
        if self.auth_ref:
            return self.auth_ref
        return API_KEY_PREFIX + re.sub(r"[^A-Za-z0-9]", "_", self.id).upper()

    def api_key(self) -> str | None:
        return os.environ.get(self.credential_env)

    def methods(self) -> list[Method]:
        ladder = []
        if self.supports_token_scores:
            ladder.append(Method.TOKEN_SCORES)
        if self.supports_continuation_scores:
            ladder.append(Method.PER_OPTION_CONTINUATION)
        if self.supports_generation:
            ladder.append(Method.GENERATE_AND_MATCH)
        return ladder

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "EndpointProfile":
        if "api_key" in doc:
            raise ValueError("credentials must come from the environment, not the config")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown endpoint fields {sorted(unknown)}")
        return cls(**dict(doc))


@dataclass(frozen=True)
class SelectionResult:
    presented_label: str
    original_option_index: int
    method: Method
    raw_payload: bytes = b""
    cached: bool = False
    tie: bool = False
    scores: Mapping[str, float] | None = None


# -- rate limiting ---------------------------------------------------------


class TokenBucket:
    """Client-side token bucket; ``rate`` tokens per minute."""

    def __init__(self, rate_per_minute: float, capacity: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, self.rate)
        self.tokens = self.capacity
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping as needed; returns the time waited."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return waited
                delay = (1.0 - self.tokens) / self.rate
            self._sleep(delay)
            waited += delay


# -- answer parsing --------------------------------------------------------

_STRONG = re.compile(r"""^[\s*_"'`(\[]*([A-Z])(?:[.):\]"'`*_]|\s*$)""")
_PHRASE = re.compile(r"""(?:answer|option|choice|choose|pick|select)\w*\s*(?:is|would be|:)?\s*[*_"'`(\[]*([A-Z])\b""",
                     re.IGNORECASE)
_WEAK = re.compile(r"^[\s*_\"'`(\[]*([A-Z])\s")


def parse_answer(text: str, valid_tokens: Sequence[str],
                 option_texts: Mapping[str, str] | None = None) -> str | None:
    """Extract the chosen option letter from a free generation.

    Tried in order: a leading letter closed by punctuation ("B.", "(C)",
    "**D**"), phrases like "the answer is E", the longest option text quoted
    in the generation, and finally a leading bare letter followed by a space.
    Returns None when nothing matches.
    """
    valid = set(valid_tokens)
    m = _STRONG.match(text)
    if m and m.group(1) in valid:
        return m.group(1)
    for m in _PHRASE.finditer(text):
        letter = m.group(1).upper()
        if letter in valid and (m.group(1).isupper() or len(text) < 40):
            return letter
    if option_texts:
        low = text.lower()
        hits = [(len(t), k) for k, t in option_texts.items() if k in valid and t and t.lower() in low]
        if hits:
            return max(hits)[1]
    m = _WEAK.match(text)
    if m and m.group(1) in valid:
        return m.group(1)
    return None


def _norm_token(tok: str) -> str:
    return tok.strip().strip("\"'`.()[]:*").strip()


# -- HTTP client -----------------------------------------------------------


class ChatClient:
    """Shareable handle for one endpoint."""

    def __init__(
        self,
        endpoint: EndpointProfile,
        transport: httpx.BaseTransport | None = None,
        sink: Callable[[bytes], None] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.endpoint = endpoint
        self.sink = sink
        self._sleep = sleep
        self.bucket = TokenBucket(endpoint.rate_limit, clock=clock, sleep=sleep)
        headers = {"Content-Type": "application/json"}
        key = endpoint.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(base_url=endpoint.base_url.rstrip("/"), headers=headers,
                                  timeout=endpoint.timeout, transport=transport)
        self.requests_sent = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def post(self, path: str, body: Mapping[str, Any]) -> tuple[dict, bytes]:
        """POST with rate limiting and bounded exponential backoff."""
        last = "no attempt made"
        for attempt in range(self.endpoint.max_attempts):
            if attempt:
                self._sleep(self.endpoint.backoff_base * 2 ** (attempt - 1))
            self.bucket.acquire()
            self.requests_sent += 1
            try:
                resp = self._http.post(path, json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("%s %s attempt %d failed: %s", self.endpoint.id, path, attempt + 1, last)
                continue
            payload = resp.content
            if self.sink is not None:
                self.sink(payload)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("%s %s attempt %d: %s", self.endpoint.id, path, attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise ClientError(f"{self.endpoint.id}: HTTP {resp.status_code}: {payload[:200]!r}")
            try:
                return json.loads(payload), payload
            except ValueError as exc:
                raise ClientError(f"{self.endpoint.id}: response is not JSON") from exc
        raise TransportError(f"{self.endpoint.id}: giving up after {self.endpoint.max_attempts} attempts ({last})")

    # -- selection methods ------------------------------------------------

    def _messages(self, bundle: PromptBundle) -> list[dict]:
        if not self.endpoint.supports_system_role and any(r == "system" for r, _ in bundle.messages):
            raise UnsupportedError(f"endpoint {self.endpoint.id} has no system role")
        return [{"role": r, "content": t} for r, t in bundle.messages]

    def _pick(self, bundle: PromptBundle, scores: dict[str, float], method: Method, raw: bytes) -> SelectionResult:
        # Ties go to the earliest presented label.
        best = max(scores.values())
        winners = [k for k, _ in bundle.candidate_answers if scores.get(k) == best]
        label = winners[0]
        return SelectionResult(label, bundle.option_for(label), method, raw,
                               tie=len(winners) > 1, scores=dict(scores))

    def by_token_scores(self, bundle: PromptBundle) -> SelectionResult:
        body = {
            "model": self.endpoint.model_name,
            "messages": self._messages(bundle),
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": self.endpoint.top_logprobs,
        }
        doc, raw = self.post("/chat/completions", body)
        try:
            top = doc["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UnsupportedError("response carries no token scores") from exc
        valid = set(bundle.extraction.valid_tokens)
        scores: dict[str, float] = {}
        for entry in top:
            tok = _norm_token(entry.get("token", ""))
            if tok in valid:
                scores[tok] = max(scores.get(tok, -math.inf), float(entry["logprob"]))
        if not scores:
            raise Refusal("no valid option among the returned token scores", raw, Method.TOKEN_SCORES)
        return self._pick(bundle, scores, Method.TOKEN_SCORES, raw)

    def by_continuation(self, bundle: PromptBundle) -> SelectionResult:
        prompt = format_messages(bundle.messages) + "ASSISTANT :"
        scores, raws = {}, []
        for label, _ in bundle.candidate_answers:
            body = {
                "model": self.endpoint.model_name,
                "prompt": prompt + " " + label,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
                "temperature": 0,
            }
            doc, raw = self.post("/completions", body)
            raws.append(raw)
            try:
                lp = doc["choices"][0]["logprobs"]
                offsets, values = lp["text_offset"], lp["token_logprobs"]
            except (KeyError, IndexError, TypeError) as exc:
                raise UnsupportedError("response carries no echoed token scores") from exc
            tail = [v for o, v in zip(offsets, values) if o >= len(prompt) and v is not None]
            if not tail:
                raise UnsupportedError("continuation tokens missing from echo")
            scores[label] = float(sum(tail))
        return self._pick(bundle, scores, Method.PER_OPTION_CONTINUATION, b"\n".join(raws))

    def by_generation(self, bundle: PromptBundle, max_tokens: int = 16) -> SelectionResult:
        body = {
            "model": self.endpoint.model_name,
            "messages": self._messages(bundle),
            "max_tokens": max_tokens,
            "temperature": 0,
        }
        doc, raw = self.post("/chat/completions", body)
        try:
            text = doc["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ClientError("malformed chat completion response") from exc
        options = _option_texts(bundle)
        label = parse_answer(text, bundle.extraction.valid_tokens, options)
        if label is None:
            raise Refusal(f"no valid option in generation {text[:80]!r}", raw, Method.GENERATE_AND_MATCH)
        return SelectionResult(label, bundle.option_for(label), Method.GENERATE_AND_MATCH, raw)

    def select(self, bundle: PromptBundle) -> SelectionResult:
        """Walk the capability ladder; the first method that yields an answer wins."""
        ladder = self.endpoint.methods()
        if not ladder:
            raise UnsupportedError(f"endpoint {self.endpoint.id} supports no selection method")
        impl = {
            Method.TOKEN_SCORES: self.by_token_scores,
            Method.PER_OPTION_CONTINUATION: self.by_continuation,
            Method.GENERATE_AND_MATCH: self.by_generation,
        }
        refusal: Refusal | None = None
        for method in ladder:
            try:
                return impl[method](bundle)
            except Refusal as exc:
                refusal = exc
            except UnsupportedError as exc:
                if "system role" in str(exc):
                    raise
                log.info("%s: %s unavailable (%s)", self.endpoint.id, method.value, exc)
        if refusal is not None:
            raise refusal
        raise UnsupportedError(f"endpoint {self.endpoint.id}: all selection methods failed")


def _option_texts(bundle: PromptBundle) -> dict[str, str]:
    return dict(bundle.meta.get("option_texts", {}))


def select_option(bundle: PromptBundle, endpoint: EndpointProfile,
                  transport: httpx.BaseTransport | None = None) -> SelectionResult:
    with ChatClient(endpoint, transport) as client:
        return client.select(bundle)


# -- cache -----------------------------------------------------------------


def cache_key(bundle: PromptBundle, endpoint: EndpointProfile) -> str:
    doc = {
        "model": endpoint.model_name,
        "messages": [list(m) for m in bundle.messages],
        "candidates": [list(c) for c in bundle.candidate_answers],
        "methods": [m.value for m in endpoint.methods()],
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class CacheStore:
    """Directory with one JSON record per digest; records are never rewritten."""

    def __init__(self, directory: str | Path, clock: Callable[[], float] = time.time):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._guard = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._write = threading.Lock()

    def path(self, digest: str) -> Path:
        return self.directory / digest[:2] / f"{digest}.json"

    def lock_for(self, digest: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(digest, threading.Lock())

    def __contains__(self, digest: str) -> bool:
        return self.path(digest).exists()

    def get(self, digest: str) -> SelectionResult | None:
        path = self.path(digest)
        if not path.exists():
            return None
        try:
            rec = json.loads(path.read_text(encoding="utf-8"))
            if rec["digest"] != digest:
                raise ValueError("digest mismatch")
            resp = rec["response"]
            return SelectionResult(
                resp["label"], int(resp["option"]), Method(resp["method"]),
                base64.b64decode(rec["raw_payload"]), True, bool(resp.get("tie", False)),
                resp.get("scores"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorruption(f"corrupted cache record {digest}: {exc}") from exc

    def put(self, digest: str, bundle: PromptBundle, endpoint: EndpointProfile, result: SelectionResult) -> None:
        rec = {
            "digest": digest,
            "request": {
                "model": endpoint.model_name,
                "messages": [list(m) for m in bundle.messages],
                "candidates": [list(c) for c in bundle.candidate_answers],
            },
            "response": {
                "label": result.presented_label,
                "option": result.original_option_index,
                "method": result.method.value,
                "tie": result.tie,
                "scores": dict(result.scores) if result.scores else None,
            },
            "raw_payload": base64.b64encode(result.raw_payload).decode("ascii"),
            "timestamp": self._clock(),
        }
        path = self.path(digest)
        with self._write:
            if path.exists():
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(rec, sort_keys=True, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)


def run_with_cache(bundle: PromptBundle, client: "ChatClient", store: CacheStore) -> SelectionResult:
    """Serve from ``store`` when possible; concurrent callers of one digest share a request."""
    digest = cache_key(bundle, client.endpoint)
    with store.lock_for(digest):
        hit = store.get(digest)
        if hit is not None:
            return hit
        result = client.select(bundle)
        store.put(digest, bundle, client.endpoint, result)
        return result


# -- scripted respondents --------------------------------------------------


Policy = Callable[[PromptBundle], str]


@dataclass(frozen=True)
class ScriptedRespondent:
    """Deterministic offline respondent; ``policy`` maps a bundle to a presented label."""

    policy: Policy
    description: str = ""
    supports_system_role: bool = True
    calls: list = field(default_factory=list, compare=False, repr=False)

    def select(self, bundle: PromptBundle) -> SelectionResult:
        if not self.supports_system_role and any(r == "system" for r, _ in bundle.messages):
            raise UnsupportedError("scripted respondent configured without a system role")
        label = self.policy(bundle)
        if label not in bundle.extraction.valid_tokens:
            raise Refusal(f"policy returned {label!r}", label.encode() if isinstance(label, str) else b"",
                          Method.SCRIPTED)
        payload = json.dumps({"policy": self.description, "label": label}).encode()
        return SelectionResult(label, bundle.option_for(label), Method.SCRIPTED, payload)

    # -- stock policies ---------------------------------------------------

    @classmethod
    def first(cls) -> "ScriptedRespondent":
        return cls(lambda b: b.candidate_answers[0][0], "always the first presented option")

    @classmethod
    def option(cls, q: Questionnaire, value: int) -> "ScriptedRespondent":
        """Always the option with numeric value ``value``."""
        def policy(b: PromptBundle) -> str:
            scale = q.scale_of(q.item(b.meta["item_id"]))
            return b.label_for(scale.numeric_values.index(value))
        return cls(policy, f"always the option valued {value}")

    @classmethod
    def random(cls, seed: int) -> "ScriptedRespondent":
        """Uniform choice hashed from (seed, item, permutation, context); ignores the perspective."""
        def policy(b: PromptBundle) -> str:
            key = f"{seed}|{b.meta.get('item_id')}|{b.meta.get('permutation')}|{b.meta.get('context')}|" \
                  f"{b.meta.get('variant')}"
            h = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")
            return b.candidate_answers[h % len(b.candidate_answers)][0]
        return cls(policy, f"perspective-blind uniform random (seed {seed})")

    @classmethod
    def target_maximal(cls, q: Questionnaire) -> "ScriptedRespondent":
        """Maximize every induced target dimension and minimize all others."""
        def policy(b: PromptBundle) -> str:
            item = q.item(b.meta["item_id"])
            targets = {d for d, direction in b.meta.get("targets", ()) if direction == "high"}
            sign = _item_sign(q, item.id)
            want_high = (item.dimension_id in targets) == (sign > 0)
            scale = q.scale_of(item)
            value = max(scale.numeric_values) if want_high else min(scale.numeric_values)
            return b.label_for(scale.numeric_values.index(value))
        return cls(policy, "maximal on target dimensions, minimal elsewhere")

    @classmethod
    def latent_shift(
        cls,
        q: Questionnaire,
        dimension_id: str,
        shifted_context: str,
        effect: float,
        sigma: float = 0.5,
        base: float | None = None,
        permutations: int = 50,
        seed: int = 0,
    ) -> "ScriptedRespondent":
        """Answers driven by a latent trait that moves one dimension in one context.

        Per (context, dimension) the latent level over permutations is a
        shuffled set of normal quantiles with standard deviation ``sigma``; in
        ``shifted_context`` the level of ``dimension_id`` rises by
        ``effect * sigma``.  Items of a dimension add evenly spaced offsets
        before rounding so the dimension mean tracks the latent level.
        """
        nd = statistics.NormalDist()
        quantiles = np.array([nd.inv_cdf((i + 0.5) / permutations) for i in range(permutations)])
        order_cache: dict[tuple[str, str], np.ndarray] = {}

        def order(context: str, dim: str) -> np.ndarray:
            key = (context, dim)
            if key not in order_cache:
                h = hashlib.sha256(f"{seed}|{context}|{dim}".encode()).digest()
                rng = np.random.Generator(np.random.PCG64(int.from_bytes(h[:8], "big")))
                order_cache[key] = rng.permutation(permutations)
            return order_cache[key]

        def policy(b: PromptBundle) -> str:
            item = q.item(b.meta["item_id"])
            scale = q.scale_of(item)
            lo, hi = min(scale.numeric_values), max(scale.numeric_values)
            centre = (lo + hi) / 2.0 if base is None else base
            r = int(b.meta["permutation"]) % permutations
            dim, ctx = item.dimension_id, b.meta["context"]
            level = centre + sigma * quantiles[order(ctx, dim)[r]]
            if dim == dimension_id and ctx == shifted_context:
                level += effect * sigma
            members = [it.id for it in q.items_of(dim)]
            offset = (members.index(item.id) + 0.5) / len(members) - 0.5
            value = int(min(hi, max(lo, math.floor(level + offset + 0.5))))
            if _item_sign(q, item.id) < 0:
                value = int(scale.reflect(value))
            return b.label_for(scale.numeric_values.index(value))

        return cls(policy, f"latent shift d={effect} on {dimension_id} in {shifted_context}")


def _item_sign(q: Questionnaire, item_id: str) -> int:
    """+1 when a higher answer raises the item's dimension score."""
    item = q.item(item_id)
    if q.scoring_rule is ScoringRule.VSM_FORMULA:
        c = q.dimension(item.dimension_id).vsm_constants
        coef = {"q1": c["A"], "q2": -c["A"], "q3": c["B"], "q4": -c["B"]}[item.vsm_slot]
        return 1 if coef > 0 else -1
    return 1 if item.keying > 0 else -1
