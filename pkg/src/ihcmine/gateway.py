"""Client for chat-completions and embeddings endpoints, plus prompt templates.

The wire schema is the de facto chat-completions JSON (model / messages /
max_tokens / temperature, answer in choices[0].message.content), so any
local or hosted server that speaks it works. Payloads are serialized
canonically so identical requests produce byte-identical bodies.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .domain import AbstractRecord
from .errors import EmptyOutputError, GatewayError, GatewayProtocolError, ValidationError

logger = logging.getLogger(__name__)

CLASSIFY_TEMPLATE = "classify_v1.txt"
EXTRACT_TEMPLATE = "extract_v1.txt"
CLASSIFY_MAX_NEW_TOKENS = 4
EXTRACT_MAX_NEW_TOKENS = 1024
SYSTEM_PROMPT = "You are a careful biomedical text mining assistant."

_PROMPT_DIR = Path(__file__).parent / "prompts"
_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_prompt: str
    max_new_tokens: int
    temperature: float = 0.0


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int

    def __post_init__(self) -> None:
        if self.dim != len(self.values):
            raise ValidationError(f"dim {self.dim} != len(values) {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError("embedding contains non-finite values")

    @classmethod
    def of(cls, values) -> "EmbeddingVector":
        vals = tuple(float(v) for v in values)
        return cls(values=vals, dim=len(vals))


def template_text(name: str) -> str:
    return (_PROMPT_DIR / name).read_text(encoding="utf-8")


def template_hash(name: str) -> str:
    return hashlib.sha256((_PROMPT_DIR / name).read_bytes()).hexdigest()


def prompt_template_hashes() -> dict[str, str]:
    return {"classify": template_hash(CLASSIFY_TEMPLATE), "extract": template_hash(EXTRACT_TEMPLATE)}


def _render(template: str, record: AbstractRecord) -> str:
    return template.replace("{{TITLE}}", record.title).replace("{{ABSTRACT}}", record.abstract_text)


def render_classification_prompt(record: AbstractRecord, model_id: str = "default") -> ChatRequest:
    if not record.abstract_text:
        raise ValidationError(f"record {record.pmid} has no abstract text")
    return ChatRequest(
        model_id=model_id,
        system_prompt=SYSTEM_PROMPT,
        user_prompt=_render(template_text(CLASSIFY_TEMPLATE), record),
        max_new_tokens=CLASSIFY_MAX_NEW_TOKENS,
    )


def render_extraction_prompt(record: AbstractRecord, model_id: str = "default") -> ChatRequest:
    if not record.abstract_text:
        raise ValidationError(f"record {record.pmid} has no abstract text")
    return ChatRequest(
        model_id=model_id,
        system_prompt=SYSTEM_PROMPT,
        user_prompt=_render(template_text(EXTRACT_TEMPLATE), record),
        max_new_tokens=EXTRACT_MAX_NEW_TOKENS,
    )


def wire_payload(request: ChatRequest) -> bytes:
    """Canonical request body; identical requests serialize identically."""
    payload = {
        "model": request.model_id,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_prompt},
        ],
        "max_tokens": request.max_new_tokens,
        "temperature": request.temperature,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class LlmGateway:
    """Thread-safe client with a bounded in-flight request pool.

    Callers may invoke chat()/embed() from many threads; at most
    ``max_in_flight`` requests are outstanding at any time.
    """

    def __init__(
        self,
        llm_base_url: str,
        model_id: str = "default",
        emb_base_url: str | None = None,
        emb_model_id: str | None = None,
        api_key: str | None = None,
        max_in_flight: int = 4,
        retries: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
    ) -> None:
        self.llm_base_url = llm_base_url.rstrip("/")
        self.model_id = model_id
        self.emb_base_url = (emb_base_url or llm_base_url).rstrip("/")
        self.emb_model_id = emb_model_id or model_id
        self.api_key = api_key
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, url: str, body: bytes) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if attempt > 0:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    response = self._session.post(
                        url, data=body, headers=self._headers(), timeout=self.timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("request to %s failed (attempt %d): %s", url, attempt + 1, exc)
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = GatewayError(f"HTTP {response.status_code} from {url}")
                logger.warning("HTTP %d from %s (attempt %d)", response.status_code, url, attempt + 1)
                continue
            if response.status_code != 200:
                raise GatewayError(f"HTTP {response.status_code} from {url}: {response.text[:200]}")
            try:
                return response.json()
            except ValueError as exc:
                raise GatewayProtocolError(f"non-JSON response from {url}") from exc
        raise GatewayError(f"request to {url} failed after {self.retries} attempts: {last_error}")

    def chat(self, request: ChatRequest) -> str:
        """Returns the first completion's text, trimmed of trailing whitespace only."""
        if not request.user_prompt:
            raise ValidationError("empty user prompt")
        data = self._post(self.llm_base_url + "/v1/chat/completions", wire_payload(request))
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayProtocolError(f"unexpected chat response shape: {data!r:.200}") from exc
        if text is None:
            raise EmptyOutputError("completion content was null")
        text = text.rstrip()
        if not text:
            raise EmptyOutputError("completion was empty")
        return text

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        """One vector per input, order preserved, uniform dimension."""
        if not texts:
            raise ValidationError("embed() needs at least one text")
        if any(not t for t in texts):
            raise ValidationError("embed() inputs must be non-empty strings")
        payload = {"model": self.emb_model_id, "input": list(texts)}
        body = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        data = self._post(self.emb_base_url + "/v1/embeddings", body)
        try:
            items = sorted(data["data"], key=lambda item: item["index"])
            vectors = [EmbeddingVector.of(item["embedding"]) for item in items]
        except (KeyError, TypeError) as exc:
            raise GatewayProtocolError(f"unexpected embeddings response shape: {data!r:.200}") from exc
        if len(vectors) != len(texts):
            raise GatewayProtocolError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        dims = {v.dim for v in vectors}
        if len(dims) > 1:
            raise GatewayProtocolError(f"embedding dimensions differ within one batch: {sorted(dims)}")
        return vectors
