"""Vision-LLM dispatch with a record/replay cassette backend.

A cassette is a directory holding one ``<digest>.json`` file per exchange.
The digest covers the JSON block, the raw bytes of both images, the model
name and the temperature, so any change to what the model would see misses
the cassette instead of replaying a stale answer.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

import httpx
from filelock import FileLock
from PIL import Image

from .errors import (
    AuthError,
    CassetteMiss,
    GatewayError,
    GatewayTimeout,
    RateLimited,
    TransportError,
    ValidationError,
)
from .prompting import ImageAttachment, PromptBundle, estimate_tokens

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "LEGEND_FORGE_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
MAX_RETRIES_CAP = 5
LOCK_NAME = ".cassette.lock"


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str = DEFAULT_ENDPOINT
    api_key_env_var: str = DEFAULT_API_KEY_ENV
    model_name: str = "gpt-4o"
    timeout: float = 120.0
    max_retries: int = 3
    parallelism: int = 4
    profile: str = "openai-chat"
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValidationError("gateway timeout must be positive")
        if not 0 <= self.max_retries <= MAX_RETRIES_CAP:
            raise ValidationError(f"max_retries must be in [0, {MAX_RETRIES_CAP}]")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be at least 1")
        if self.backoff_base < 0:
            raise ValidationError("backoff_base must be non-negative")
        if self.profile not in PROFILES:
            raise ValidationError(f"unknown request profile {self.profile!r}; known: {sorted(PROFILES)}")


@dataclass(frozen=True)
class Exchange:
    request_digest: str
    response_text: str
    input_tokens: int
    output_tokens: int
    latency_ms: int
    timestamp: str

    def to_cassette(self) -> dict:
        doc = asdict(self)
        doc["digest"] = doc.pop("request_digest")
        return doc

    @classmethod
    def from_cassette(cls, doc: Mapping) -> "Exchange":
        return cls(
            request_digest=str(doc["digest"]),
            response_text=str(doc["response_text"]),
            input_tokens=int(doc["input_tokens"]),
            output_tokens=int(doc["output_tokens"]),
            latency_ms=int(doc["latency_ms"]),
            timestamp=str(doc["timestamp"]),
        )


class Gateway(Protocol):
    parallelism: int

    def send(self, bundle: PromptBundle) -> Exchange: ...


def request_digest(bundle: PromptBundle) -> str:
    h = hashlib.sha256()

    def part(tag: bytes, payload: bytes) -> None:
        h.update(tag + b":" + str(len(payload)).encode("ascii") + b":")
        h.update(payload)

    part(b"json", bundle.json_block.encode("utf-8"))
    for name, image in (("example", bundle.example_image), ("target", bundle.target_image)):
        part(name.encode("ascii"), b"" if image is None else image.data)
    part(b"model", bundle.request_settings.model_name.encode("utf-8"))
    part(b"temperature", repr(float(bundle.request_settings.temperature)).encode("ascii"))
    return h.hexdigest()


# -- request profiles ---------------------------------------------------------


def _png_bytes(image: ImageAttachment) -> tuple[bytes, str]:
    if image.media_type == "image/png":
        return image.data, "image/png"
    # Chat vision endpoints do not take TIFF.
    with Image.open(io.BytesIO(image.data)) as im:
        buf = io.BytesIO()
        im.convert("RGB").save(buf, format="PNG")
    return buf.getvalue(), "image/png"


def _data_url(image: ImageAttachment) -> str:
    data, media = _png_bytes(image)
    return f"data:{media};base64,{base64.b64encode(data).decode('ascii')}"


def _openai_chat_body(bundle: PromptBundle) -> dict:
    content = []
    if bundle.example_image is not None:
        content.append({"type": "image_url", "image_url": {"url": _data_url(bundle.example_image)}})
    content.append({"type": "text", "text": bundle.json_block})
    if bundle.target_image is not None:
        content.append({"type": "image_url", "image_url": {"url": _data_url(bundle.target_image)}})
    s = bundle.request_settings
    return {
        "model": s.model_name,
        "temperature": s.temperature,
        "max_tokens": s.max_output_tokens,
        "messages": [{"role": "user", "content": content}],
    }


def _openai_chat_parse(doc: Mapping) -> tuple[str, Optional[int], Optional[int]]:
    try:
        text = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"response lacks choices[0].message.content: {exc!r}") from exc
    if not isinstance(text, str):
        raise TransportError("response content is not text")
    usage = doc.get("usage") or {}
    return text, usage.get("prompt_tokens"), usage.get("completion_tokens")


@dataclass(frozen=True)
class RequestProfile:
    build_body: Callable[[PromptBundle], dict]
    parse_body: Callable[[Mapping], tuple[str, Optional[int], Optional[int]]]


PROFILES: dict[str, RequestProfile] = {
    "openai-chat": RequestProfile(_openai_chat_body, _openai_chat_parse),
}


def _redacted(body: dict) -> str:
    def scrub(obj):
        if isinstance(obj, dict):
            return {k: scrub(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [scrub(v) for v in obj]
        if isinstance(obj, str) and obj.startswith("data:") and len(obj) > 64:
            return f"<{len(obj)} chars of inline image>"
        return obj

    return json.dumps(scrub(body))


# -- live backend -------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class LiveGateway:
    """HTTP gateway. Reads the API key from the environment at construction."""

    def __init__(
        self,
        config: GatewayConfig,
        *,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
        environ: Mapping[str, str] = os.environ,
    ):
        key = environ.get(config.api_key_env_var)
        if not key:
            raise AuthError(f"environment variable {config.api_key_env_var} is not set")
        self.config = config
        self.parallelism = config.parallelism
        self._key = key
        self._profile = PROFILES[config.profile]
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.parallelism)
        self.retry_log: list[tuple[int, str, float]] = []

    def backoff(self, attempt: int) -> float:
        return self.config.backoff_base * (2 ** attempt)

    def send(self, bundle: PromptBundle) -> Exchange:
        digest = request_digest(bundle)
        body = self._profile.build_body(bundle)
        headers = {"Authorization": f"Bearer {self._key}", "Content-Type": "application/json"}
        log.debug("request %s -> %s body=%s", digest[:12], self.config.endpoint_url, _redacted(body))

        with self._slots:
            start = time.monotonic()
            doc = self._post_with_retries(body, headers, digest)
            latency_ms = int(round((time.monotonic() - start) * 1000))

        text, in_tok, out_tok = self._profile.parse_body(doc)
        log.debug("response %s text=%r", digest[:12], text)
        if in_tok is None:
            in_tok = estimate_tokens(bundle)
        if out_tok is None:
            out_tok = math.ceil(len(text.encode("utf-8")) / 4)
        return Exchange(digest, text, int(in_tok), int(out_tok), latency_ms, _utc_now())

    def _post_with_retries(self, body: dict, headers: dict, digest: str) -> Mapping:
        last: GatewayError = TransportError("no attempt made")
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.backoff(attempt - 1)
                self.retry_log.append((attempt, type(last).__name__, delay))
                log.warning(
                    "request %s retry %d/%d in %.1fs after %s",
                    digest[:12], attempt, self.config.max_retries, delay, last,
                )
                self._sleep(delay)
            try:
                resp = self._client.post(self.config.endpoint_url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request timed out after {self.config.timeout}s: {exc}")
                continue
            except httpx.HTTPError as exc:
                last = TransportError(f"transport failure: {exc}")
                continue

            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {status})")
            if status == 429:
                last = RateLimited("endpoint rate limited the request (HTTP 429)")
                continue
            if status >= 500:
                last = TransportError(f"endpoint error HTTP {status}")
                continue
            if status >= 400:
                raise TransportError(f"endpoint refused request: HTTP {status} {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"endpoint returned non-JSON body: {exc}") from exc
        raise last

    def close(self) -> None:
        self._client.close()


def send(bundle: PromptBundle, config: GatewayConfig) -> Exchange:
    gw = LiveGateway(config)
    try:
        return gw.send(bundle)
    finally:
        gw.close()


# -- cassettes ---------------------------------------------------------------


def cassette_file(cassette_dir: Path | str, digest: str) -> Path:
    return Path(cassette_dir) / f"{digest}.json"


def _cassette_text(exchange: Exchange) -> str:
    return json.dumps(exchange.to_cassette(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def record(exchange: Exchange, cassette_path: Path | str) -> Path:
    """Store ``exchange`` under its digest. Identical re-records leave the file untouched."""
    directory = Path(cassette_path)
    directory.mkdir(parents=True, exist_ok=True)
    target = cassette_file(directory, exchange.request_digest)
    text = _cassette_text(exchange)
    with FileLock(str(directory / LOCK_NAME)):
        if target.is_file() and target.read_text(encoding="utf-8") == text:
            return target
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.chmod(tmp, 0o644)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return target


def replay(bundle: PromptBundle, cassette_path: Path | str) -> Exchange:
    digest = request_digest(bundle)
    file = cassette_file(cassette_path, digest)
    try:
        doc = json.loads(file.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CassetteMiss(digest, str(cassette_path)) from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GatewayError(f"corrupt cassette {file}: {exc}") from exc
    try:
        exchange = Exchange.from_cassette(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise GatewayError(f"cassette {file} is missing fields: {exc}") from exc
    if exchange.request_digest != digest:
        raise GatewayError(f"cassette {file} holds digest {exchange.request_digest}, expected {digest}")
    return exchange


class ReplayGateway:
    def __init__(self, cassette_dir: Path | str, parallelism: int = 4):
        self.cassette_dir = Path(cassette_dir)
        self.parallelism = parallelism

    def send(self, bundle: PromptBundle) -> Exchange:
        return replay(bundle, self.cassette_dir)


class RecordingGateway:
    """Forward to a live gateway and store every exchange in a cassette."""

    def __init__(self, inner: Gateway, cassette_dir: Path | str):
        self.inner = inner
        self.cassette_dir = Path(cassette_dir)
        self.parallelism = inner.parallelism

    def send(self, bundle: PromptBundle) -> Exchange:
        exchange = self.inner.send(bundle)
        record(exchange, self.cassette_dir)
        return exchange
