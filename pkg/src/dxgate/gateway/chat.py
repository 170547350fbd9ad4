"""Chat-completions clients for the local SLM and the remote LLM."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx

from ..tokenize import split_words

SUMMARIZE_TEMPLATE = "Summarize the following text.\n\n{text}"
TRANSLATE_TEMPLATE = "Translate the following text into {target_language}. Output only the translation.\n\n{text}"
CORRECT_TEMPLATE = ("Correct the following text for coherence and grammar. "
                    "Output only the corrected text.\n\n{text}")

SUMMARY_MAX_TOKENS = 142
LENGTH_SLACK = 1.3  # translations/corrections may be at most 30% longer than the input


class EndpointError(RuntimeError):
    def __init__(self, role: str, message: str):
        super().__init__(f"{role} endpoint failed: {message}")
        self.role = role


@dataclass
class ChatEndpointConfig:
    role: str  # "slm" | "llm"
    base_url: str
    model: str
    auth_env: str | None = None
    timeout: float = 120.0
    summary_max_tokens: int = SUMMARY_MAX_TOKENS
    length_slack: float = LENGTH_SLACK
    templates: dict[str, str] = field(default_factory=dict)

    def template(self, task: str) -> str:
        defaults = {"summarize": SUMMARIZE_TEMPLATE, "translate": TRANSLATE_TEMPLATE,
                    "correct": CORRECT_TEMPLATE}
        return self.templates.get(task, defaults.get(task, "{text}"))

    @classmethod
    def from_dict(cls, d: dict) -> "ChatEndpointConfig":
        return cls(**d)


class ChatClient(Protocol):
    def chat(self, messages: Sequence[dict], max_tokens: int | None) -> str: ...


class HttpChatClient:
    """POSTs ``{"model", "messages", "max_tokens"}`` to ``{base_url}/chat/completions``."""

    def __init__(self, config: ChatEndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        if config.auth_env and os.environ.get(config.auth_env):
            headers["Authorization"] = f"Bearer {os.environ[config.auth_env]}"
        self._client = httpx.Client(base_url=config.base_url.rstrip("/"), timeout=config.timeout,
                                    headers=headers, transport=transport)

    def chat(self, messages, max_tokens=None) -> str:
        body = {"model": self.config.model, "messages": list(messages)}
        if max_tokens is not None:
            body["max_tokens"] = int(max_tokens)
        try:
            resp = self._client.post("/chat/completions", json=body)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise EndpointError(self.config.role, str(exc)) from exc

    def close(self):
        self._client.close()


def render_task(config: ChatEndpointConfig, task: str, text: str, target_language: str | None = None,
                instruction: str | None = None) -> tuple[list[dict], int | None]:
    """Messages and output-token cap for running ``task`` on ``text``."""
    if task == "custom":
        if not instruction or "{text}" not in instruction:
            raise ValueError("custom tasks need an instruction template containing {text}")
        content = instruction.replace("{text}", text)
        cap = None
    elif task == "summarize":
        content = config.template("summarize").replace("{text}", text)
        cap = config.summary_max_tokens
    elif task in ("translate", "correct"):
        content = (config.template(task)
                   .replace("{target_language}", target_language or "")
                   .replace("{text}", text))
        cap = max(1, math.ceil(config.length_slack * len(split_words(text)[0])))
    else:
        raise ValueError(f"unknown task {task!r}")
    return [{"role": "user", "content": content}], cap
