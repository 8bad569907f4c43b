"""Client for a chat-completions-style VLM judge deciding whether an
inpainting result contains hallucinated objects."""

from __future__ import annotations

import asyncio
import base64
import io
import os
import re
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import httpx
import numpy as np
from PIL import Image

DEFAULT_PROMPT = (
    "The image has two panels. The left panel shows an input photo in which the region to be filled is "
    "covered by a semi-transparent gray mask. The right panel shows the inpainting result. "
    "Decide whether the result contains objects inside the masked region that are not supported by the "
    "surrounding context (hallucinated objects). Reason briefly, then finish with a final line that is "
    "exactly 'ANSWER: YES' if hallucinated objects appear or 'ANSWER: NO' otherwise."
)

_ANSWER = re.compile(r"^\s*answer\s*:\s*(yes|no)\b", re.IGNORECASE)
_BARE = re.compile(r"^\W*(yes|no)\W*$", re.IGNORECASE)


class JudgeTransportError(RuntimeError):
    pass


class JudgeProtocolError(ValueError):
    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True)
class JudgeVerdict:
    hallucination: bool
    raw_response: str
    model_id: str


def parse_verdict(text: str) -> bool:
    """``ANSWER: YES|NO`` on the last non-empty line, or a bare yes/no reply."""
    lines = [l for l in text.strip().splitlines() if l.strip()]
    if lines:
        for candidate in (_ANSWER.match(lines[-1]), _BARE.match(text.strip())):
            if candidate:
                return candidate.group(1).lower() == "yes"
    raise JudgeProtocolError("reply carries no ANSWER: YES|NO verdict", text)


def encode_png(image: np.ndarray) -> bytes:
    a = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a).save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class JudgeConfig:
    base_url: str = "http://127.0.0.1:8000/v1"
    model_id: str = "Qwen3-VL-235B-A22B-Thinking"
    token_env: str = "ASUKA_JUDGE_TOKEN"
    max_retries: int = 3
    timeout_s: float = 60.0
    max_in_flight: int = 4
    backoff_s: float = 0.05
    prompt_template: str = DEFAULT_PROMPT


_TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}


class JudgeClient:
    def __init__(self, config: JudgeConfig = JudgeConfig()):
        self.config = config

    def _headers(self, item_id: str | None) -> dict:
        h = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            h["Authorization"] = f"Bearer {token}"
        if item_id is not None:
            h["X-Request-Id"] = str(item_id)
        return h

    def _payload(self, png: bytes, prompt: str) -> dict:
        url = "data:image/png;base64," + base64.b64encode(png).decode()
        return {
            "model": self.config.model_id,
            "temperature": 0,
            "messages": [{"role": "user", "content": [
                {"type": "image_url", "image_url": {"url": url}},
                {"type": "text", "text": prompt},
            ]}],
        }

    def _verdict(self, response: httpx.Response) -> JudgeVerdict:
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise JudgeProtocolError(f"malformed completion payload: {e}", response.text) from e
        return JudgeVerdict(parse_verdict(text), text, self.config.model_id)

    def judge(self, composite: np.ndarray, item_id: str | None = None, prompt: str | None = None) -> JudgeVerdict:
        """Blocking single request with retries on transient failures."""
        payload = self._payload(encode_png(composite), prompt or self.config.prompt_template)
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last = None
        with httpx.Client(timeout=self.config.timeout_s) as client:
            for attempt in range(self.config.max_retries + 1):
                try:
                    r = client.post(url, json=payload, headers=self._headers(item_id))
                    if r.status_code not in _TRANSIENT_STATUS:
                        r.raise_for_status()
                        return self._verdict(r)
                    last = f"HTTP {r.status_code}"
                except httpx.TransportError as e:
                    last = repr(e)
                except httpx.HTTPStatusError as e:
                    raise JudgeTransportError(f"judge endpoint rejected the request: {e}") from e
                time.sleep(self.config.backoff_s * 2 ** attempt)
        raise JudgeTransportError(f"judge unreachable after {self.config.max_retries + 1} attempts: {last}")

    async def _ajudge(self, client: httpx.AsyncClient, sem: asyncio.Semaphore, item_id: str, png: bytes,
                      prompt: str) -> JudgeVerdict:
        payload = self._payload(png, prompt)
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(self.config.max_retries + 1):
            try:
                async with sem:
                    r = await client.post(url, json=payload, headers=self._headers(item_id))
                if r.status_code not in _TRANSIENT_STATUS:
                    r.raise_for_status()
                    return self._verdict(r)
                last = f"HTTP {r.status_code}"
            except httpx.TransportError as e:
                last = repr(e)
            except httpx.HTTPStatusError as e:
                raise JudgeTransportError(f"judge endpoint rejected the request: {e}") from e
            await asyncio.sleep(self.config.backoff_s * 2 ** attempt)
        raise JudgeTransportError(f"judge unreachable after {self.config.max_retries + 1} attempts: {last}")

    async def ajudge_many(self, items: Sequence[tuple[str, np.ndarray]], prompt: str | None = None,
                          item_timeout_s: float | None = None) -> list[dict]:
        """Judge items with at most ``max_in_flight`` concurrent requests.

        Every item yields one record ``{id, verdict, raw_response,
        latency_ms, error}``; failures are recorded, never raised, so one bad
        item cannot stall the batch.
        """
        prompt = prompt or self.config.prompt_template
        sem = asyncio.Semaphore(self.config.max_in_flight)
        item_timeout_s = item_timeout_s or self.config.timeout_s * (self.config.max_retries + 1)
        limits = httpx.Limits(max_connections=self.config.max_in_flight)

        async def one(client, item_id, image):
            t0 = time.perf_counter()
            rec = {"id": item_id, "verdict": None, "raw_response": None, "latency_ms": None, "error": None}
            try:
                v = await asyncio.wait_for(self._ajudge(client, sem, item_id, encode_png(image), prompt),
                                           item_timeout_s)
                rec.update(verdict=v.hallucination, raw_response=v.raw_response)
            except JudgeProtocolError as e:
                rec.update(error=f"protocol: {e}", raw_response=e.raw_response)
            except JudgeTransportError as e:
                rec.update(error=f"transport: {e}")
            except asyncio.TimeoutError:
                rec.update(error="timeout")
            rec["latency_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            return rec

        async with httpx.AsyncClient(timeout=self.config.timeout_s, limits=limits) as client:
            return list(await asyncio.gather(*(one(client, i, img) for i, img in items)))

    def judge_many(self, items, prompt: str | None = None, item_timeout_s: float | None = None) -> list[dict]:
        return asyncio.run(self.ajudge_many(items, prompt, item_timeout_s))


def judge_hallucination(client: JudgeClient, composite: np.ndarray, prompt_template: str | None = None,
                        item_id: str | None = None) -> JudgeVerdict:
    return client.judge(composite, item_id, prompt_template)
