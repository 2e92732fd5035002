"""Text-generation providers.

:class:`ChatCompletionProvider` talks to any OpenAI-compatible
``/chat/completions`` endpoint. The mock providers run fully offline.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from typing import Callable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.2


class ProviderError(RuntimeError):
    """Transport, HTTP or authentication failure talking to a provider."""


class TextGenProvider(Protocol):
    model_id: str

    def complete(self, prompt: str) -> str: ...


class ChatCompletionProvider:
    """Client for an OpenAI-compatible chat-completion server.

    The API key is read from the environment variable named by
    ``api_key_env``; it is never taken from config files. Transient failures
    (timeouts, connection errors, 429 and 5xx) are retried once.
    """

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        temperature: float = DEFAULT_TEMPERATURE,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.model_id = model
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.temperature = temperature
        key = os.environ.get(api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _post(self, payload: dict) -> httpx.Response:
        url = f"{self.base_url}/chat/completions"
        for attempt in (1, 2):
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                if attempt == 2:
                    raise ProviderError(f"transport error: {exc}") from exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempt == 2:
                    raise ProviderError(f"HTTP {resp.status_code} from {url}")
                time.sleep(0.5)
                continue
            if resp.status_code in (401, 403):
                raise ProviderError(f"authentication failed (HTTP {resp.status_code})")
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return resp
        raise AssertionError("unreachable")

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        resp = self._post(payload)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat-completion response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


class ScriptedProvider:
    """Replays canned replies, or calls ``script(prompt, call_index)``.

    With a list, the last reply repeats once the list is exhausted.
    """

    def __init__(self, script: Sequence[str] | Callable[[str, int], str], model_id: str = "scripted") -> None:
        self.model_id = model_id
        self._script = script
        self._lock = threading.Lock()
        self.calls = 0
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        with self._lock:
            idx = self.calls
            self.calls += 1
            self.prompts.append(prompt)
        if callable(self._script):
            return self._script(prompt, idx)
        return self._script[min(idx, len(self._script) - 1)]


_GRID_LINE = re.compile(r"^\|(.*)\|$")


def _parse_grid(prompt: str) -> tuple[str | None, list[list[str]]]:
    """Recover (title, rows) from the table block at the end of a prompt."""
    marker = "Input Table:\n"
    block = prompt.split(marker, 1)[1] if marker in prompt else prompt
    title = None
    rows: list[list[str]] = []
    for line in block.splitlines():
        m = _GRID_LINE.match(line)
        if not m:
            if not rows and line.strip():
                title = line.strip()
            continue
        cells = [c.strip() for c in m.group(1).split("|")]
        if all(set(c) <= {"-"} and c for c in cells):
            continue
        rows.append(cells)
    return title, rows


class HeuristicMockProvider:
    """Deterministic offline generator that answers every prompt kind used here.

    Headers are taken from the first grid row; questions pair headers with
    values from the second row, enough of them to satisfy the count rule.
    """

    def __init__(self, model_id: str = "mock-heuristic") -> None:
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        if '"sub_queries"' in prompt:
            question = prompt.rsplit("Question:\n", 1)[-1].strip()
            parts = [p.strip(" ?.") for p in re.split(r"\band\b|;", question) if p.strip(" ?.")]
            subs = [p + "?" for p in parts] if len(parts) >= 2 else [question]
            return json.dumps({"sub_queries": subs[:3]})

        title, rows = _parse_grid(prompt)
        headers = [h for h in (rows[0] if rows else []) if h and h.lower() != "nan" and not h.startswith("Unnamed:")]
        if '"description"' in prompt:
            cols = ", ".join(headers) if headers else "no named columns"
            subject = f"The table {title}" if title else "The table"
            return json.dumps({"description": f"{subject} has {len(rows)} rows. Its columns are {cols}."})

        sample = rows[1] if len(rows) > 1 else []
        need = max(1, math.ceil(len(headers) / 2))
        questions = []
        for i in range(need):
            h = headers[i % len(headers)] if headers else "value"
            other = headers[(i + 1) % len(headers)] if len(headers) > 1 else None
            val = sample[(i + 1) % len(sample)] if sample else ""
            if other and val:
                questions.append(f"What is the '{h}' when '{other}' is {val}?")
            else:
                questions.append(f"Which entries are listed under '{h}'?")
        payload: dict = {"questions": questions}
        if '"headers"' in prompt:
            payload = {"headers": headers or ["value"], "questions": questions}
        return json.dumps(payload, ensure_ascii=False)
