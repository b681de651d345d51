"""Client contracts for external model services.

Three service kinds sit behind duck-typed backends:

* chat completion: ``backend.chat(ChatRequest) -> str``
* speech synthesis: ``backend.synthesize(TtsRequest) -> AudioBuffer``
* forced alignment: ``backend.align(text, AudioBuffer) -> AlignmentResult``

HTTP adapters speak an OpenAI-compatible chat dialect (plus two small JSON
endpoints for TTS and alignment). Mock backends are pure functions of their
input so complete pipeline runs are reproducible offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np
from scipy.signal import resample_poly

from . import SAMPLE_RATE
from .acoustics import AudioBuffer, wav_bytes, wav_from_bytes
from .util import ConvoforgeError, canonical_json

log = logging.getLogger(__name__)

CHAT_ROLES = ("system", "user", "assistant")


class GatewayError(ConvoforgeError):
    pass


class TransportError(GatewayError):
    def __init__(self, message: str, body: str | None = None):
        super().__init__(message if body is None else f"{message}: {body[:500]}")
        self.body = body


class GatewayTimeout(GatewayError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


# ---------------------------------------------------------------------------
# Requests


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.8
    max_tokens: int = 1024
    seed: int | None = None
    # routing hints for mocks and logs; never sent over the wire
    metadata: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, ChatMessage) else ChatMessage(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise GatewayError("chat request has no messages")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise GatewayError("max_tokens must be positive")
        body = list(msgs)
        if body[0].role == "system":
            body = body[1:]
        if not body:
            raise GatewayError("chat request has only a system message")
        for m in msgs:
            if m.role not in CHAT_ROLES:
                raise GatewayError(f"unknown chat role {m.role!r}")
        for i, m in enumerate(body):
            if m.role == "system":
                raise GatewayError("system message allowed only as the first message")
            expected = "user" if i % 2 == 0 else "assistant"
            if m.role != expected:
                raise GatewayError(f"message {i} should be {expected!r}, got {m.role!r}")

    @classmethod
    def simple(cls, system: str | None, user: str, **kw) -> "ChatRequest":
        msgs = ([ChatMessage("system", system)] if system else []) + [ChatMessage("user", user)]
        return cls(tuple(msgs), **kw)

    def wire(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        return payload

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.wire()).encode("utf-8")).hexdigest()

    @property
    def prompt(self) -> str:
        return "\n\n".join(m.content for m in self.messages)


@dataclass(frozen=True, eq=False)
class TtsRequest:
    text: str
    voice: AudioBuffer
    sample_rate: int = SAMPLE_RATE
    seed: int | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise GatewayError("TTS text is empty")
        if self.voice.duration <= 0:
            raise GatewayError("voice reference has zero duration")
        if self.sample_rate <= 0:
            raise GatewayError("target sample rate must be positive")


@dataclass(frozen=True)
class AlignedToken:
    text: str
    onset: float
    duration: float


@dataclass(frozen=True)
class AlignmentResult:
    tokens: tuple[AlignedToken, ...]
    duration: float

    def __post_init__(self):
        prev = 0.0
        for t in self.tokens:
            if t.onset < prev - 1e-9:
                raise GatewayError("alignment onsets must be non-decreasing")
            if t.duration < 0 or t.onset + t.duration > self.duration + 1e-6:
                raise GatewayError(f"aligned token {t.text!r} extends past the utterance")
            prev = t.onset


# ---------------------------------------------------------------------------
# Retry


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff: tuple[float, ...] = (1.0, 4.0)
    timeout: float = 120.0

    def wait(self, attempt: int) -> float:
        """Seconds to sleep after failed attempt number ``attempt`` (1-based)."""
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt - 1, len(self.backoff) - 1)]

    def max_total_wait(self) -> float:
        return sum(self.wait(i) for i in range(1, self.attempts))


CHAT_POLICY = RetryPolicy(timeout=120.0)
TTS_POLICY = RetryPolicy(timeout=300.0)


class _Retryable(Exception):
    pass


def call_with_retry(fn: Callable[[], Any], policy: RetryPolicy, what: str,
                    sleep: Callable[[float], None] = time.sleep) -> Any:
    last: Exception | None = None
    for attempt in range(1, policy.attempts + 1):
        try:
            return fn()
        except _Retryable as exc:
            last = exc.__cause__ or exc
            log.warning("%s attempt %d/%d failed: %s", what, attempt, policy.attempts, last)
            if attempt < policy.attempts:
                sleep(policy.wait(attempt))
    raise GatewayTimeout(f"{what} failed after {policy.attempts} attempts: {last}", policy.attempts)


class _HttpService:
    def __init__(self, url: str, model: str, api_key_env: str | None, policy: RetryPolicy,
                 max_concurrency: int, transport: httpx.BaseTransport | None,
                 sleep: Callable[[float], None]):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.policy = policy
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._client = httpx.Client(timeout=policy.timeout, transport=transport)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> httpx.Response:
        def once():
            try:
                with self._slots:
                    resp = self._client.post(self.url + path, json=payload, headers=self._headers())
            except (httpx.TimeoutException, httpx.NetworkError) as exc:
                raise _Retryable() from exc
            if resp.status_code == 429 or resp.status_code >= 500:
                raise _Retryable() from TransportError(f"HTTP {resp.status_code}", resp.text)
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.url + path}", resp.text)
            return resp

        return call_with_retry(once, self.policy, f"POST {self.url + path}", self._sleep)

    def close(self):
        self._client.close()


class HttpChatBackend(_HttpService):
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, url: str, model: str, api_key_env: str | None = "CONVOFORGE_API_KEY",
                 policy: RetryPolicy = CHAT_POLICY, max_concurrency: int = 4,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 audit: Callable[[dict, str], None] | None = None):
        super().__init__(url, model, api_key_env, policy, max_concurrency, transport, sleep)
        self.audit = audit

    def chat(self, request: ChatRequest) -> str:
        payload = {"model": self.model, **request.wire()}
        resp = self._post("/chat/completions", payload)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError("malformed chat completion reply", resp.text) from None
        if not isinstance(content, str):
            raise TransportError("chat completion content is not text", resp.text)
        if self.audit is not None:
            self.audit(payload, content)
        return content


def _encode_audio(buffer: AudioBuffer) -> dict:
    return {"format": "wav", "data": base64.b64encode(wav_bytes(buffer)).decode("ascii")}


def resample(buffer: AudioBuffer, rate: int) -> AudioBuffer:
    if buffer.sample_rate == rate:
        return buffer
    g = gcd(buffer.sample_rate, rate)
    return AudioBuffer(resample_poly(buffer.samples, rate // g, buffer.sample_rate // g), rate)


class HttpTtsBackend(_HttpService):
    """POST ``/audio/speech`` with a base64 WAV voice reference; reply body is a WAV file."""

    def __init__(self, url: str, model: str, api_key_env: str | None = "CONVOFORGE_API_KEY",
                 policy: RetryPolicy = TTS_POLICY, max_concurrency: int = 1,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(url, model, api_key_env, policy, max_concurrency, transport, sleep)

    def synthesize(self, request: TtsRequest) -> AudioBuffer:
        payload = {
            "model": self.model,
            "input": request.text,
            "voice_reference": _encode_audio(request.voice),
            "sample_rate": request.sample_rate,
            "response_format": "wav",
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        resp = self._post("/audio/speech", payload)
        try:
            audio = wav_from_bytes(resp.content)
        except Exception:
            raise TransportError("TTS reply is not a readable WAV file", resp.text[:200]) from None
        return resample(audio, request.sample_rate)


class HttpAligner(_HttpService):
    """POST ``/align`` with text and base64 WAV; reply ``{"tokens": [{text, onset, duration}]}``."""

    def __init__(self, url: str, model: str, api_key_env: str | None = "CONVOFORGE_API_KEY",
                 policy: RetryPolicy = TTS_POLICY, max_concurrency: int = 2,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(url, model, api_key_env, policy, max_concurrency, transport, sleep)

    def align(self, text: str, audio: AudioBuffer) -> AlignmentResult:
        resp = self._post("/align", {"model": self.model, "text": text, "audio": _encode_audio(audio)})
        try:
            toks = tuple(AlignedToken(str(t["text"]), float(t["onset"]), float(t["duration"]))
                         for t in resp.json()["tokens"])
        except (ValueError, KeyError, TypeError):
            raise TransportError("malformed alignment reply", resp.text) from None
        return AlignmentResult(toks, audio.duration)


# ---------------------------------------------------------------------------
# Service operations


def chat(backend, request: ChatRequest) -> str:
    return backend.chat(request)


def synthesize(backend, request: TtsRequest) -> AudioBuffer:
    audio = backend.synthesize(request)
    if audio.num_samples == 0:
        raise TransportError("speech service returned zero-length audio")
    if audio.sample_rate != request.sample_rate:
        audio = resample(audio, request.sample_rate)
    return audio


# ---------------------------------------------------------------------------
# Mocks


class ScriptedChat:
    """Replies with the script entries in order; raises once the script runs out."""

    def __init__(self, script: Sequence[str]):
        self.script = list(script)
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def chat(self, request: ChatRequest) -> str:
        with self._lock:
            i = len(self.calls)
            self.calls.append(request)
        if i >= len(self.script):
            raise GatewayError(f"scripted mock exhausted after {len(self.script)} replies")
        return self.script[i]


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")


class MockTts:
    """Deterministic tone-burst speech stand-in.

    Each word becomes a 120-300 Hz tone (frequency from a hash of the word and
    the voice) inside a fixed slot of 60/wpm seconds, with 10 ms cosine fades.
    """

    def __init__(self, wpm: float = 160.0, amplitude: float = 0.5, fill: float = 0.8):
        self.wpm = wpm
        self.amplitude = amplitude
        self.fill = fill

    def word_slot(self) -> float:
        return 60.0 / self.wpm

    def synthesize(self, request: TtsRequest) -> AudioBuffer:
        words = request.text.split()
        fs = request.sample_rate
        n = int(round(len(words) * self.word_slot() * fs))
        voice = _stable_hash(hashlib.sha256(request.voice.samples.tobytes()).hexdigest())
        out = np.zeros(n)
        fade = max(1, int(round(0.010 * fs)))
        for i, w in enumerate(words):
            start = int(round(i * self.word_slot() * fs))
            stop = int(round((i + 1) * self.word_slot() * fs))
            length = int((stop - start) * self.fill)
            if length <= 0:
                continue
            freq = 120.0 + (_stable_hash(w.lower()) + voice) % 181
            t = np.arange(length) / fs
            tone = np.sin(2 * np.pi * freq * t) + 0.3 * np.sin(4 * np.pi * freq * t)
            env = np.ones(length)
            f = min(fade, length // 2)
            if f:
                ramp = 0.5 * (1 - np.cos(np.pi * np.arange(f) / f))
                env[:f] = ramp
                env[length - f:] = ramp[::-1]
            out[start:start + length] = self.amplitude / 1.3 * tone * env
        return AudioBuffer(out, fs)


class MockAligner:
    """Aligner matching :class:`MockTts`: equal word slots over the utterance."""

    def __init__(self, fill: float = 0.8):
        self.fill = fill

    def align(self, text: str, audio: AudioBuffer) -> AlignmentResult:
        words = text.split()
        if not words:
            return AlignmentResult((), audio.duration)
        slot = audio.duration / len(words)
        toks = tuple(AlignedToken(w, i * slot, slot * self.fill) for i, w in enumerate(words))
        return AlignmentResult(toks, audio.duration)


class RecordReplayChat:
    """Wraps a chat backend; stores replies under ``<dir>/<request digest>.json``.

    mode ``record`` calls through and saves, ``replay`` only reads (missing
    fixture is an error), ``auto`` replays when present and records otherwise.
    """

    def __init__(self, directory: str | Path, inner=None, mode: str = "auto"):
        if mode not in ("record", "replay", "auto"):
            raise GatewayError(f"unknown record/replay mode {mode!r}")
        if mode != "replay" and inner is None:
            raise GatewayError("recording needs an inner backend")
        self.directory = Path(directory)
        self.inner = inner
        self.mode = mode

    def _path(self, request: ChatRequest) -> Path:
        return self.directory / f"{request.digest()}.json"

    def chat(self, request: ChatRequest) -> str:
        path = self._path(request)
        if self.mode != "record" and path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        if self.mode == "replay":
            raise GatewayError(f"no recorded reply for request {request.digest()[:12]} in {self.directory}")
        reply = self.inner.chat(request)
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"request": request.wire(), "response": reply},
                                   sort_keys=True, indent=2), encoding="utf-8")
        return reply


def make_chat_backend(spec: str, model: str = "gemma-3-27b-it", **kw):
    """Build a chat backend from a CLI-style spec.

    ``mock`` | ``mock:<script.json>`` | ``replay:<dir>`` | ``http(s)://host/v1``
    """
    from .mock_llm import MockLLM

    if spec == "mock":
        return MockLLM()
    if spec.startswith("mock:"):
        return MockLLM.from_script_file(spec[5:])
    if spec.startswith("replay:"):
        return RecordReplayChat(spec[7:], mode="replay")
    if spec.startswith(("http://", "https://")):
        return HttpChatBackend(spec, model, **kw)
    raise GatewayError(f"unrecognized chat backend {spec!r}")


def make_tts_backend(spec: str, model: str = "qwen3-tts-1.7b", **kw):
    if spec == "mock":
        return MockTts()
    if spec.startswith(("http://", "https://")):
        return HttpTtsBackend(spec, model, **kw)
    raise GatewayError(f"unrecognized TTS backend {spec!r}")


def make_aligner(spec: str | None, model: str = "qwen3-forced-aligner", **kw):
    if spec in (None, "", "none", "heuristic"):
        return None
    if spec == "mock":
        return MockAligner()
    if spec.startswith(("http://", "https://")):
        return HttpAligner(spec, model, **kw)
    raise GatewayError(f"unrecognized aligner {spec!r}")
