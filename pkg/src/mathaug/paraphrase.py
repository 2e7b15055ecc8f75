"""Question-paraphrase generation and validation against a chat-completions endpoint.

All traffic flows through an append-only request cache keyed by the SHA-256
of the request body, so any run can be replayed offline byte-for-byte. The
endpoint is anything speaking the OpenAI-compatible chat-completions schema.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Optional

from .corpus import MathProblem

log = logging.getLogger(__name__)


class ParaphraseError(Exception):
    pass


class EndpointError(ParaphraseError):
    pass


class CacheMiss(ParaphraseError):
    pass


class CandidateState(str, Enum):
    PENDING = "pending"
    VALIDATED = "validated"
    REJECTED = "rejected"


@dataclass(frozen=True)
class ParaphraseCandidate:
    original_id: str
    text: str
    round: int = 1
    state: CandidateState = CandidateState.PENDING
    reject_reason: Optional[str] = None
    model_name: str = ""
    request_id: str = ""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gpt-4"
    api_key_env_name: str = "OPENAI_API_KEY"
    max_concurrent_requests: int = 4
    requests_per_minute: int = 60
    timeout_seconds: float = 30.0
    max_retries: int = 3
    temperature: float = 0.7

    def __post_init__(self):
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")


@dataclass(frozen=True)
class PromptTemplates:
    generation: str = (
        "Rewrite the following math question in different words while keeping "
        "its meaning and all quantities exactly the same. Reply with only the "
        "rewritten question.\n\nQuestion: {question}"
    )
    validation: str = (
        "Question: {question}\nProposed answer: {answer}\n\nDoes this answer "
        "match this question? Reply with YES or NO as the first word, then an "
        "optional reason."
    )

    @classmethod
    def from_file(cls, path: str) -> "PromptTemplates":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(**{k: v for k, v in obj.items() if k in ("generation", "validation")})


class TokenBucket:
    """Simple token bucket limiting requests per minute. Clock is injectable."""

    def __init__(self, per_minute: int, clock: Callable[[], float], sleep: Callable[[float], None]):
        self.capacity = per_minute
        self.rate = per_minute / 60.0
        self.tokens = float(per_minute)
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


def _default_transport(url: str, body: dict, headers: dict, timeout: float):
    import requests

    response = requests.post(url, json=body, headers=headers, timeout=timeout)
    try:
        payload = response.json()
    except ValueError:
        payload = {"error": response.text}
    return response.status_code, payload


class ChatClient:
    """Cached, rate-limited, retrying chat-completions client.

    Modes: "auto" (cache first, endpoint on miss), "record" (always call, cache
    everything), "replay" (cache only; a miss is an error).
    """

    def __init__(
        self,
        config: EndpointConfig,
        cache_path: Optional[str] = None,
        mode: str = "auto",
        transport: Optional[Callable] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ):
        if mode not in ("auto", "record", "replay"):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.transport = transport or _default_transport
        self.clock = clock
        self.sleep = sleep
        self.rng = rng or random.Random()
        self.bucket = TokenBucket(config.requests_per_minute, clock, sleep)
        self.request_log: list[float] = []  # acquire times, for rate-contract tests
        self.cache_path = cache_path
        self._cache: dict[str, dict] = {}
        self._cache_lock = threading.Lock()
        if cache_path and os.path.exists(cache_path):
            with open(cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._cache[entry["request_sha256"]] = entry["response_body"]

    @staticmethod
    def request_key(body: dict) -> str:
        canonical = json.dumps(body, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _persist(self, key: str, response: dict) -> None:
        with self._cache_lock:
            self._cache[key] = response
            if self.cache_path:
                entry = {
                    "request_sha256": key,
                    "response_body": response,
                    "timestamp": self.clock(),
                }
                with open(self.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def _call_endpoint(self, body: dict) -> dict:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        api_key = os.environ.get(self.config.api_key_env_name, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        delay = 1.0
        last_error = "no attempts made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                jittered = delay * (1.0 + self.rng.uniform(0, 0.25))
                log.info("endpoint retry %d after %.2fs", attempt, jittered)
                self.sleep(jittered)
                delay *= 2
            self.bucket.acquire()
            self.request_log.append(self.clock())
            try:
                status, payload = self.transport(url, body, headers, self.config.timeout_seconds)
            except Exception as exc:  # connection-level failure
                last_error = f"transport error: {exc}"
                continue
            if status == 200:
                return payload
            last_error = f"HTTP {status}: {json.dumps(payload)[:200]}"
            if status not in (429, 500, 502, 503, 504):
                break  # non-retryable
        raise EndpointError(f"endpoint failed after retries: {last_error}")

    def complete(self, messages: list[dict], n: int = 1) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "n": n,
        }
        key = self.request_key(body)
        if self.mode != "record" and key in self._cache:
            return self._cache[key]
        if self.mode == "replay":
            raise CacheMiss(f"no cached response for request {key[:12]}…")
        response = self._call_endpoint(body)
        self._persist(key, response)
        return response

    def completion_texts(self, response: dict) -> list[str]:
        return [choice["message"]["content"] for choice in response.get("choices", [])]


# ---------------------------------------------------------------------------
# Paraphrase operations

def _normalized(text: str) -> str:
    return " ".join(text.split()).lower()


def generate_paraphrases(
    question: str,
    n: int,
    client: ChatClient,
    templates: PromptTemplates,
    original_id: str = "",
    round_no: int = 1,
) -> list[ParaphraseCandidate]:
    """Up to ``n`` paraphrase candidates; duplicates and echoes are collapsed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = templates.generation.format(question=question)
    response = client.complete([{"role": "user", "content": prompt}], n=n)
    request_id = response.get("id", "")
    model = response.get("model", client.config.model_name)

    seen = {_normalized(question)}
    candidates = []
    for text in client.completion_texts(response):
        text = text.strip()
        norm = _normalized(text)
        if not text or norm in seen:
            continue
        seen.add(norm)
        candidates.append(
            ParaphraseCandidate(
                original_id=original_id,
                text=text,
                round=round_no,
                model_name=model,
                request_id=request_id,
            )
        )
    return candidates


def validate_paraphrase(
    candidate: ParaphraseCandidate,
    gold_answer: str,
    client: ChatClient,
    templates: PromptTemplates,
) -> ParaphraseCandidate:
    """Strict YES/NO judgment; an unparseable reply retries once, then rejects."""
    if candidate.state is not CandidateState.PENDING:
        raise ValueError("candidate already judged")
    prompt = templates.validation.format(question=candidate.text, answer=gold_answer)
    for attempt in range(2):
        messages = [{"role": "user", "content": prompt}]
        if attempt:
            messages.append(
                {"role": "user", "content": "Answer strictly YES or NO as the first word."}
            )
        response = client.complete(messages, n=1)
        texts = client.completion_texts(response)
        reply = texts[0].strip() if texts else ""
        head = reply.split()[0].upper().strip(".,!:;") if reply.split() else ""
        if head == "YES":
            return replace(candidate, state=CandidateState.VALIDATED)
        if head == "NO":
            return replace(
                candidate, state=CandidateState.REJECTED, reject_reason="JudgedMismatch"
            )
    return replace(
        candidate, state=CandidateState.REJECTED, reject_reason="UnparseableJudgment"
    )


@dataclass
class ParaphraseReport:
    generated: int = 0
    validated: int = 0
    rejected: int = 0


def paraphrase_corpus(
    problems: Iterable[MathProblem],
    n_per_question: int,
    client: ChatClient,
    templates: Optional[PromptTemplates] = None,
    max_validation_rounds: int = 1,
) -> tuple[list[MathProblem], ParaphraseReport]:
    """Append validated paraphrases as new problems (id ``<orig>#p<k>``).

    Originals are always retained. Paraphrased problems share the original's
    rationale and gold answer verbatim; only the question text changes.
    Processing order is sorted by id, so output is deterministic regardless
    of request scheduling.
    """
    templates = templates or PromptTemplates()
    report = ParaphraseReport()
    out: list[MathProblem] = []
    for problem in sorted(problems, key=lambda p: p.id):
        out.append(problem)
        accepted = 0
        for round_no in range(1, max_validation_rounds + 1):
            candidates = generate_paraphrases(
                problem.question,
                n_per_question,
                client,
                templates,
                original_id=problem.id,
                round_no=round_no,
            )
            report.generated += len(candidates)
            for candidate in candidates:
                judged = validate_paraphrase(
                    candidate, problem.gold_answer.literal, client, templates
                )
                if judged.state is CandidateState.VALIDATED:
                    accepted += 1
                    report.validated += 1
                    out.append(
                        MathProblem(
                            id=f"{problem.id}#p{accepted}",
                            source=problem.source,
                            question=judged.text,
                            rationale=problem.rationale,
                            gold_answer=problem.gold_answer,
                            raw=None,
                        )
                    )
                else:
                    report.rejected += 1
            if accepted:
                break  # accept on first successful round
    return out, report
