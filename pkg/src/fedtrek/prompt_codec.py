"""Textual interface between graphs, dialogue and the model.

Templates live in ``fedtrek/templates`` as versioned text files so tests can
pin their bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .pkg_store import SubPkg, to_prompt_json

TEMPLATE_VERSION = "v1"

ROLES = ("system", "user", "assistant")

# entity_type -> (Recommendation_Domain, Item_Type)
DOMAINS = {
    "movie": ("movie", "movies"),
    "recipe": ("recipe", "recipes"),
}

_PKG_MARKER = "Use this knowledge graph when responding to their queries: "
_TURN_PREFIX = {"system": "System: ", "user": "User: ", "assistant": "Assistant: "}
_TURN_SEP = "\n\n"
_BULLET = re.compile(r"^\s*-(.*)$")


class PromptError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    return resources.files("fedtrek.templates").joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class PromptSpec:
    recommendation_domain: str
    item_type: str
    user_id: str
    subpkg: SubPkg
    dialogue: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "dialogue", tuple((r, t) for r, t in self.dialogue))
        for i, (role, _) in enumerate(self.dialogue):
            if role not in ROLES:
                raise PromptError(f"unknown role {role!r}")
            if role == "system" and i != 0:
                raise PromptError("a system turn may only appear first")

    @classmethod
    def for_domain(cls, entity_type: str, subpkg: SubPkg, dialogue=()) -> "PromptSpec":
        domain, items = DOMAINS.get(entity_type, (entity_type, entity_type + "s"))
        return cls(domain, items, subpkg.user_id, subpkg, tuple(dialogue))


def render_system_prompt(spec: PromptSpec) -> str:
    if not spec.user_id:
        raise PromptError("user_id must be non-empty")
    text = load_template("system_prompt")
    text = text.replace("{Recommendation_Domain}", spec.recommendation_domain)
    text = text.replace("{Item_Type}", spec.item_type)
    text = text.replace("{User_ID}", spec.user_id)
    # last, so braces inside the JSON are never mistaken for placeholders
    return text.replace("{User_PKG}", to_prompt_json(spec.subpkg))


def synthetic_request(item_type: str) -> str:
    return load_template("synthetic_request").replace("{Item_Type}", item_type)


def render_prompt(spec: PromptSpec) -> str:
    """Flatten the system prompt and dialogue into one role-prefixed string."""
    turns = [("system", render_system_prompt(spec))]
    turns += [(r, t) for r, t in spec.dialogue if r != "system"]
    return _TURN_SEP.join(_TURN_PREFIX[r] + t for r, t in turns)


def extract_prompt_pkg(prompt: str) -> tuple[str, dict[str, list[str]]]:
    """Recover ``(user_id, {"liked": [...], "disliked": [...]})`` from a rendered prompt."""
    at = prompt.find(_PKG_MARKER)
    if at < 0:
        raise PromptError("prompt does not contain a knowledge graph")
    try:
        obj, _ = json.JSONDecoder().raw_decode(prompt, at + len(_PKG_MARKER))
    except json.JSONDecodeError as exc:
        raise PromptError(f"unreadable knowledge graph in prompt: {exc}") from None
    if not isinstance(obj, dict) or len(obj) != 1:
        raise PromptError("knowledge graph must have exactly one user key")
    (user_id, inner), = obj.items()
    return user_id, {rel: list(inner.get(rel, [])) for rel in ("liked", "disliked")}


def format_completion(items: Sequence[str]) -> str:
    if not items:
        raise PromptError("cannot format an empty recommendation list")
    return load_template("completion_header") + "\n\n" + "\n".join(f"- {x}" for x in items)


def parse_completion(text: str) -> list[str]:
    """Dash-bulleted items in order. Non-bullet lines are ignored.

    Repeated items are kept; callers that score predictions deduplicate after
    normalization.
    """
    out = []
    for line in text.splitlines():
        m = _BULLET.match(line)
        if m:
            item = m.group(1).strip()
            if item:
                out.append(item)
    return out


def normalize_label(label: str) -> str:
    """Trimmed, whitespace-collapsed, casefolded label; the year suffix is kept."""
    return " ".join(label.split()).casefold()
