"""Preference examples, datasets and their JSON Lines form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .pkg_store import PersonalKnowledgeGraph

LABELS = ("desirable", "undesirable")
ORIGINS = ("real", "synthetic_mask", "synthetic_redundancy")


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceExample:
    client_id: str
    prompt: str
    completion: str
    label: str
    origin: str = "real"
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.prompt or not self.completion:
            raise RecordError("prompt and completion must be non-empty")
        if self.label not in LABELS:
            raise RecordError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.origin not in ORIGINS:
            raise RecordError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    @property
    def desirable(self) -> bool:
        return self.label == "desirable"

    @property
    def synthetic(self) -> bool:
        return self.origin != "real"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_ids"] = list(self.source_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceExample":
        return cls(d["client_id"], d["prompt"], d["completion"], d["label"], d.get("origin", "real"),
                   tuple(d.get("source_ids", ())))


@dataclass
class Dataset:
    """Train/test examples plus the per-client graphs synthetic generation draws on."""

    train: list[PreferenceExample] = field(default_factory=list)
    test: list[PreferenceExample] = field(default_factory=list)
    pkgs: dict[str, PersonalKnowledgeGraph] = field(default_factory=dict)
    domain: str = "movie"

    def by_client(self) -> dict[str, list[PreferenceExample]]:
        out: dict[str, list[PreferenceExample]] = {}
        for ex in self.train:
            out.setdefault(ex.client_id, []).append(ex)
        return dict(sorted(out.items()))

    def real_only(self) -> "Dataset":
        return Dataset([e for e in self.train if not e.synthetic], list(self.test), dict(self.pkgs), self.domain)


def dumps_example(ex: PreferenceExample) -> str:
    return json.dumps(ex.to_dict(), ensure_ascii=False, sort_keys=True)


def write_examples(path: str | Path, examples: Iterable[PreferenceExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(dumps_example(ex) + "\n")
            n += 1
    return n


def read_examples(path: str | Path) -> list[PreferenceExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PreferenceExample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, RecordError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out
