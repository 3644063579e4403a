"""LLM prompt expansion with a pluggable completion client.

The instruction template is fixed and golden-tested; the completion backend
is any endpoint speaking {"instruction": str} -> {"text": str}, or a mock.
Beautification never blocks generation: any client failure falls back to
the original prompt and logs the event.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from .errors import ConfigError

log = logging.getLogger(__name__)

MAX_PROMPT_CHARS = 1000

INSTRUCTION_TEMPLATE = (
    "### System:\n"
    "You are a prompt engineer. Your mission is to expand prompts written by user. "
    "You should provide the best prompt for text to image generation in English. \n"
    "### User:\n"
    "{prompt}\n"
    "### Assistant:\n"
)

_SLOT = "{prompt}"


@dataclass(frozen=True)
class BeautifyTemplate:
    text: str = INSTRUCTION_TEMPLATE

    def __post_init__(self):
        if self.text.count(_SLOT) != 1:
            raise ConfigError("template must contain exactly one {prompt} slot")

    def render(self, prompt: str) -> str:
        # single substitution, never rescanned: a literal "{prompt}" inside
        # the user text cannot trigger recursive expansion
        return self.text.replace(_SLOT, prompt, 1)


def render_instruction(prompt: str, max_chars: int = MAX_PROMPT_CHARS) -> str:
    """The exact instruction sent to the language model."""
    if len(prompt) > max_chars:
        log.warning("prompt truncated from %d to %d characters before beautification",
                    len(prompt), max_chars)
        prompt = prompt[:max_chars]
    if prompt.strip() == "":
        log.warning("beautifying an empty prompt")
    return BeautifyTemplate().render(prompt)


class CompletionClient(Protocol):
    def complete(self, instruction: str) -> str: ...


@dataclass
class MockCompletionClient:
    """Test double: a canned reply or a callable on the instruction."""

    reply: object = ""

    def complete(self, instruction: str) -> str:
        if callable(self.reply):
            return self.reply(instruction)
        return str(self.reply)


@dataclass
class HTTPCompletionClient:
    """POST {"instruction": ...} -> {"text": ...} to a local completion endpoint."""

    endpoint: str
    timeout: float = 10.0
    max_output_chars: int = 4 * MAX_PROMPT_CHARS

    def complete(self, instruction: str) -> str:
        import requests

        resp = requests.post(self.endpoint, json={"instruction": instruction},
                             timeout=self.timeout)
        resp.raise_for_status()
        return str(resp.json()["text"])[: self.max_output_chars]


def beautify(prompt: str, client: Optional[CompletionClient],
             max_chars: int = MAX_PROMPT_CHARS,
             on_fallback: Optional[Callable[[str], None]] = None) -> str:
    """Expanded prompt, or the original unchanged on any client failure."""
    if client is None:
        return prompt
    instruction = render_instruction(prompt, max_chars)
    try:
        text = client.complete(instruction).strip()
    except Exception as exc:  # noqa: BLE001 - fallback totality by contract
        log.warning("beautification fell back to the original prompt: %s", exc)
        if on_fallback is not None:
            on_fallback(str(exc))
        return prompt
    if not text:
        log.warning("beautification returned empty text; keeping original prompt")
        return prompt
    return text[:max_chars]
