"""Turn annotated conversations and rating tables into client-partitioned KTO data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .pkg_store import (
    EntityRef,
    PersonalKnowledgeGraph,
    PreferenceTriple,
    add_preference,
    contains_entity,
    query_subpkg,
)
from .prompt_codec import PromptSpec, format_completion, render_prompt
from .records import Dataset, PreferenceExample

SENTIMENTS = ("liked", "disliked", "unknown")
MESSAGE_ROLES = ("initiator", "respondent")
# initiator is the client's user; respondent plays the recommender
_DIALOGUE_ROLE = {"initiator": "user", "respondent": "assistant"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Mention:
    entity: EntityRef
    is_recommendation: bool = False
    sentiment: str = "unknown"

    def __post_init__(self):
        if self.sentiment not in SENTIMENTS:
            raise DatasetError(f"sentiment must be one of {SENTIMENTS}, got {self.sentiment!r}")


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    mentions: tuple[Mention, ...] = ()

    def __post_init__(self):
        if self.role not in MESSAGE_ROLES:
            raise DatasetError(f"message role must be one of {MESSAGE_ROLES}, got {self.role!r}")
        object.__setattr__(self, "mentions", tuple(self.mentions))


@dataclass(frozen=True)
class ConversationLog:
    conversation_id: str
    initiator_id: str
    respondent_id: str
    messages: tuple[Message, ...]

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise DatasetError(f"conversation {self.conversation_id} has no messages")

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "initiator_id": self.initiator_id,
            "respondent_id": self.respondent_id,
            "messages": [
                {
                    "role": m.role,
                    "text": m.text,
                    "mentions": [
                        {
                            "entity": {"iri": x.entity.iri, "label": x.entity.label,
                                       "entity_type": x.entity.entity_type},
                            "is_recommendation": x.is_recommendation,
                            "sentiment": x.sentiment,
                        }
                        for x in m.mentions
                    ],
                }
                for m in self.messages
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConversationLog":
        msgs = []
        for m in d["messages"]:
            mentions = tuple(
                Mention(EntityRef(**x["entity"]), bool(x.get("is_recommendation", False)),
                        x.get("sentiment", "unknown"))
                for x in m.get("mentions", ())
            )
            msgs.append(Message(m["role"], m["text"], mentions))
        return cls(str(d["conversation_id"]), str(d["initiator_id"]), str(d["respondent_id"]), tuple(msgs))


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    recipe: EntityRef
    stars: int
    recipe_attrs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not 0 <= self.stars <= 5:
            raise DatasetError(f"stars must be in 0..5, got {self.stars}")
        object.__setattr__(self, "recipe_attrs", tuple(tuple(p) for p in self.recipe_attrs))

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "recipe": {"iri": self.recipe.iri, "label": self.recipe.label, "entity_type": self.recipe.entity_type},
            "stars": self.stars,
            "recipe_attrs": [list(p) for p in self.recipe_attrs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RatingRecord":
        return cls(str(d["user_id"]), EntityRef(**d["recipe"]), int(d["stars"]),
                   tuple(tuple(p) for p in d.get("recipe_attrs", ())))


@dataclass(frozen=True)
class EventPoint:
    conversation_id: str
    message_index: int
    order_index: int  # position of the message in the client's whole history


# -- file I/O ----------------------------------------------------------------------

def _read_jsonl(path, parse):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {type(exc).__name__}: {exc}") from None
    return out


def read_conversations(path: str | Path) -> list[ConversationLog]:
    return _read_jsonl(path, ConversationLog.from_dict)


def read_ratings(path: str | Path) -> list[RatingRecord]:
    return _read_jsonl(path, RatingRecord.from_dict)


def write_jsonl(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


# -- movie conversations ------------------------------------------------------------

def corpus_entities(corpus: Sequence[ConversationLog]) -> list[EntityRef]:
    """Every mentioned entity once, sorted by iri (the catalog order)."""
    seen: dict[str, EntityRef] = {}
    for conv in corpus:
        for m in conv.messages:
            for x in m.mentions:
                seen.setdefault(x.entity.iri, x.entity)
    return [seen[k] for k in sorted(seen)]


def rating_entities(ratings: Sequence[RatingRecord]) -> list[EntityRef]:
    seen = {r.recipe.iri: r.recipe for r in reversed(ratings)}
    return [seen[k] for k in sorted(seen)]


def partition_by_client(corpus: Sequence[ConversationLog]) -> dict[str, list[ConversationLog]]:
    """Group conversations by initiator; clients sorted by id, conversations in corpus order."""
    out: dict[str, list[ConversationLog]] = {}
    for conv in corpus:
        out.setdefault(conv.initiator_id, []).append(conv)
    return dict(sorted(out.items()))


def _history_pkg(client_convs: Sequence[ConversationLog]) -> tuple[PersonalKnowledgeGraph, list[EventPoint]]:
    """Full preference graph with order_index = global message position, plus every event point."""
    if not client_convs:
        return PersonalKnowledgeGraph(""), []
    user = client_convs[0].initiator_id
    pkg = PersonalKnowledgeGraph(user)
    events = []
    pos = 0
    for conv in client_convs:
        for mi, msg in enumerate(conv.messages):
            events.append(EventPoint(conv.conversation_id, mi, pos))
            for m in msg.mentions:
                if m.sentiment in ("liked", "disliked"):
                    pkg, _ = add_preference(pkg, PreferenceTriple(user, m.sentiment, m.entity, pos))
            pos += 1
    return pkg, events


def build_pkg_chronology(
    client_convs: Sequence[ConversationLog],
) -> list[tuple[EventPoint, PersonalKnowledgeGraph]]:
    """Snapshot of the client's graph before each message.

    A snapshot holds every liked/disliked mention from strictly earlier
    messages, in this and all earlier conversations.
    """
    full, events = _history_pkg(client_convs)
    out = []
    for ev in events:
        kept = tuple(t for t in full.triples if t.order_index < ev.order_index)
        out.append((ev, PersonalKnowledgeGraph(full.user_id, kept)))
    return out


def final_pkg(client_convs: Sequence[ConversationLog]) -> PersonalKnowledgeGraph:
    return _history_pkg(client_convs)[0]


def extract_examples(
    conv: ConversationLog,
    snapshots: Mapping[tuple[str, int], PersonalKnowledgeGraph] | Sequence[tuple[EventPoint, PersonalKnowledgeGraph]],
    domain: str = "movie",
) -> list[PreferenceExample]:
    """One or two examples per respondent message that recommends something.

    Recommended entities already in the graph are undesirable regardless of
    sentiment (redundancy takes precedence), disliked ones are undesirable,
    liked ones desirable. Unknown-sentiment recommendations that are not
    redundant carry no label and are dropped.
    """
    if not isinstance(snapshots, Mapping):
        snapshots = {(ev.conversation_id, ev.message_index): p for ev, p in snapshots}
    out = []
    for i, msg in enumerate(conv.messages):
        recs = [m for m in msg.mentions if m.is_recommendation]
        if msg.role != "respondent" or not recs:
            continue
        try:
            snap = snapshots[(conv.conversation_id, i)]
        except KeyError:
            raise DatasetError(f"no snapshot for {conv.conversation_id} message {i}") from None
        subpkg = query_subpkg(snap, domain)
        dialogue = [(_DIALOGUE_ROLE[m.role], m.text) for m in conv.messages[:i]]
        prompt = render_prompt(PromptSpec.for_domain(domain, subpkg, dialogue))

        good, bad = [], []
        seen = set()
        for m in recs:
            if m.entity.iri in seen:
                continue
            seen.add(m.entity.iri)
            if contains_entity(subpkg, m.entity):
                bad.append((m.entity, "redundant"))
            elif m.sentiment == "disliked":
                bad.append((m.entity, "disliked"))
            elif m.sentiment == "liked":
                good.append((m.entity, "liked"))
        origin = f"conv:{conv.conversation_id}/msg:{i}"
        for group, label in ((good, "desirable"), (bad, "undesirable")):
            if not group:
                continue
            out.append(PreferenceExample(
                client_id=conv.initiator_id,
                prompt=prompt,
                completion=format_completion([e.label for e, _ in group]),
                label=label,
                origin="real",
                source_ids=(origin,) + tuple(f"entity:{e.iri}:{why}" for e, why in group),
            ))
    return out


def build_movie_examples(corpus: Sequence[ConversationLog], domain: str = "movie") -> Dataset:
    """Real examples for every client; ``pkgs`` holds each client's full history graph."""
    ds = Dataset(domain=domain)
    for client, convs in partition_by_client(corpus).items():
        snaps = dict(((ev.conversation_id, ev.message_index), p) for ev, p in build_pkg_chronology(convs))
        for conv in convs:
            ds.train.extend(extract_examples(conv, snaps, domain))
        ds.pkgs[client] = final_pkg(convs)
    return ds


# -- recipes ---------------------------------------------------------------------------

LIKE_MIN_STARS = 4
DISLIKE_MAX_STARS = 2


def rating_relation(stars: int) -> str | None:
    if stars >= LIKE_MIN_STARS:
        return "liked"
    if stars <= DISLIKE_MAX_STARS:
        return "disliked"
    return None


def recipe_pkgs(ratings: Sequence[RatingRecord]) -> dict[str, PersonalKnowledgeGraph]:
    """Per-user graphs from star thresholds; order_index is the rating's position for that user."""
    pkgs: dict[str, PersonalKnowledgeGraph] = {}
    counters: dict[str, int] = {}
    for rec in ratings:
        pos = counters.get(rec.user_id, 0)
        counters[rec.user_id] = pos + 1
        pkg = pkgs.setdefault(rec.user_id, PersonalKnowledgeGraph(rec.user_id))
        rel = rating_relation(rec.stars)
        if rel is not None:
            pkgs[rec.user_id], _ = add_preference(pkg, PreferenceTriple(rec.user_id, rel, rec.recipe, pos))
    return dict(sorted(pkgs.items()))


def build_recipe_examples(ratings: Sequence[RatingRecord], synth_cfg=None) -> list[PreferenceExample]:
    """Synthetic-only examples over rating-derived graphs (there are no conversations)."""
    from .synth_gen import SynthConfig, generate_for_client

    cfg = synth_cfg or SynthConfig()
    out = []
    for user, pkg in recipe_pkgs(ratings).items():
        out.extend(generate_for_client(pkg, cfg, domain="recipe"))
    return out


def entity_iris(ex: PreferenceExample) -> list[str]:
    """Completion entity iris recorded in an example's provenance."""
    return [s[len("entity:"):].rsplit(":", 1)[0] for s in ex.source_ids if s.startswith("entity:")]


# -- splitting and reporting --------------------------------------------------------------

def split_train_test(
    examples: Sequence[PreferenceExample], holdout_fraction: float, rng_seed: int,
    origins: Sequence[str] = ("real",),
) -> tuple[list[PreferenceExample], list[PreferenceExample]]:
    """Hold out a seeded sample of desirable examples whose origin is in ``origins``.

    Examples sharing a (prompt, completion) pair move together, and a pair that
    also occurs with another label or origin is never held out, so no test
    pair appears in train.
    """
    if not 0 < holdout_fraction < 1:
        raise DatasetError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    groups: dict[tuple[str, str], list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault((ex.prompt, ex.completion), []).append(i)
    eligible = [
        key for key, idx in groups.items()
        if all(examples[i].desirable and examples[i].origin in origins for i in idx)
    ]
    n_eligible = sum(len(groups[k]) for k in eligible)
    if n_eligible == 0:
        raise DatasetError(f"no desirable {'/'.join(origins)} examples to hold out")
    target = max(1, int(round(holdout_fraction * n_eligible)))
    rng = np.random.default_rng(rng_seed)
    held: set[int] = set()
    for gi in rng.permutation(len(eligible)):
        if len(held) >= target:
            break
        held.update(groups[eligible[gi]])
    train = [ex for i, ex in enumerate(examples) if i not in held]
    test = [ex for i, ex in enumerate(examples) if i in held]
    return train, test


def build_movie_dataset(corpus: Sequence[ConversationLog], holdout_fraction: float, rng_seed: int,
                        domain: str = "movie") -> Dataset:
    """Real examples split into train/test.

    Entities recommended in a client's held-out examples are removed from that
    client's graph so synthetic generation cannot train on test answers.
    """
    ds = build_movie_examples(corpus, domain)
    ds.train, ds.test = split_train_test(ds.train, holdout_fraction, rng_seed)
    held: dict[str, set[str]] = {}
    for ex in ds.test:
        held.setdefault(ex.client_id, set()).update(entity_iris(ex))
    for client, iris in held.items():
        pkg = ds.pkgs[client]
        ds.pkgs[client] = PersonalKnowledgeGraph(pkg.user_id, tuple(t for t in pkg.triples if t.object.iri not in iris))
    return ds


def build_recipe_dataset(ratings: Sequence[RatingRecord], holdout_fraction: float, rng_seed: int,
                         synth_cfg=None) -> Dataset:
    """Rating-derived graphs with synthetic examples; masked positives form the test set."""
    from .synth_gen import SynthConfig

    cfg = synth_cfg or SynthConfig(rng_seed=rng_seed)
    examples = build_recipe_examples(ratings, cfg)
    train, test = split_train_test(examples, holdout_fraction, rng_seed, origins=("synthetic_mask",))
    return Dataset(train=train, test=test, pkgs=recipe_pkgs(ratings), domain="recipe")


def count_report(dataset: Dataset | None) -> dict:
    if dataset is None:
        return {"clients": 0, "real": 0, "synthetic": 0, "test": 0, "real_share": 0.0}
    clients = {ex.client_id for ex in dataset.train} | {ex.client_id for ex in dataset.test}
    real = sum(1 for ex in dataset.train if not ex.synthetic)
    synthetic = len(dataset.train) - real
    total = real + synthetic
    return {
        "clients": len(clients),
        "real": real,
        "synthetic": synthetic,
        "test": len(dataset.test),
        "real_share": real / total if total else 0.0,
    }
