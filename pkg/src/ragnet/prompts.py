"""Versioned prompt assets and evidence rendering."""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources

PROMPT_VERSION = "v1"
CHUNK_HEADER = "### chunk "


@lru_cache(maxsize=None)
def asset(name: str) -> str:
    return resources.files("ragnet").joinpath("assets", name).read_text(encoding="utf-8")


def fill(template: str, **values: str) -> str:
    """Single-pass ``{name}`` substitution; unknown or JSON braces are left alone."""
    return re.sub(r"\{(\w+)\}", lambda m: values.get(m.group(1), m.group(0)), template)


def tool_schemas(enable_chunk_delete: bool = True) -> list[dict]:
    tools = json.loads(asset(f"tools_{PROMPT_VERSION}.json"))
    if not enable_chunk_delete:
        tools = [t for t in tools if t["name"] != "chunk_delete"]
    return tools


def agent_system_prompt(enable_chunk_delete: bool = True) -> str:
    tools = json.dumps(tool_schemas(enable_chunk_delete), indent=2)
    return fill(asset(f"agent_system_{PROMPT_VERSION}.txt"), tools=tools).rstrip("\n")


def render_meta(meta) -> str:
    parts = []
    if meta.years:
        parts.append("years: " + ", ".join(str(y) for y in sorted(meta.years)))
    if meta.locations:
        parts.append("locations: " + ", ".join(sorted(meta.locations)))
    return " | ".join(parts)


def render_chunk(chunk_id: str, meta, text: str) -> str:
    head = CHUNK_HEADER + chunk_id
    m = render_meta(meta)
    if m:
        head += " | " + m
    return head + "\n" + text.strip()


def oneshot_prompt(question: str, rendered_chunks: list[str]) -> str:
    evidence = "\n\n".join(rendered_chunks) if rendered_chunks else "(no evidence)"
    return fill(asset(f"oneshot_answer_{PROMPT_VERSION}.txt"), evidence=evidence, question=question).rstrip("\n")


def crop_prompt(question: str, sentences: list[str]) -> str:
    listing = "\n".join(f"[{i}] {s.strip()}" for i, s in enumerate(sentences))
    return fill(asset(f"crop_{PROMPT_VERSION}.txt"), sentences=listing, question=question).rstrip("\n")


def judge_prompt(question: str, reference: str, answer: str) -> str:
    tpl = asset(f"judge_{PROMPT_VERSION}.txt")
    return fill(tpl, question=question, reference=reference, answer=answer).rstrip("\n")


def forced_answer_prompt() -> str:
    return asset(f"forced_answer_{PROMPT_VERSION}.txt").strip()
