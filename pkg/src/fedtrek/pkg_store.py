"""Personal knowledge graphs: immutable value types, growth, querying and JSON-LD I/O."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

RELATIONS = ("liked", "disliked")

SCHEMA_NS = "https://schema.org/"
PKG_NS = "https://w3id.org/fedtrek/pkg#"

# entity_type tag -> schema.org class; unknown tags fall back to the pkg namespace
SCHEMA_CLASSES = {
    "movie": "schema:Movie",
    "recipe": "schema:Recipe",
    "person": "schema:Person",
    "book": "schema:Book",
    "product": "schema:Product",
}


class PkgError(ValueError):
    """Invalid graph operation (e.g. a triple for another user)."""


class PkgParseError(ValueError):
    """Malformed JSON-LD document. ``path`` points at the offending node."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class EntityRef:
    iri: str
    label: str
    entity_type: str

    def __post_init__(self):
        if not self.iri:
            raise ValueError("EntityRef.iri must be non-empty")
        if not self.label:
            raise ValueError(f"EntityRef {self.iri!r} has an empty label")


@dataclass(frozen=True)
class PreferenceTriple:
    subject: str
    relation: str
    object: EntityRef
    order_index: int

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}, got {self.relation!r}")
        if self.order_index < 0:
            raise ValueError(f"order_index must be >= 0, got {self.order_index}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.relation, self.object.iri)


@dataclass(frozen=True)
class PersonalKnowledgeGraph:
    user_id: str
    triples: tuple[PreferenceTriple, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "triples", tuple(self.triples))
        seen = set()
        prev = -1
        for t in self.triples:
            if t.subject != self.user_id:
                raise PkgError(f"triple subject {t.subject!r} != graph user {self.user_id!r}")
            if t.order_index < prev:
                raise PkgError("triples must be sorted by order_index")
            if t.key in seen:
                raise PkgError(f"duplicate triple {t.key}")
            seen.add(t.key)
            prev = t.order_index

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def entities(self) -> list[EntityRef]:
        """Distinct objects in first-seen order."""
        out: dict[str, EntityRef] = {}
        for t in self.triples:
            out.setdefault(t.object.iri, t.object)
        return list(out.values())

    def with_relation(self, relation: str) -> list[PreferenceTriple]:
        return [t for t in self.triples if t.relation == relation]

    @classmethod
    def from_triples(cls, user_id: str, triples: Iterable[PreferenceTriple]) -> "PersonalKnowledgeGraph":
        """Build a graph by repeated ``add_preference``; duplicates are dropped."""
        pkg = cls(user_id)
        for t in triples:
            pkg, _ = add_preference(pkg, t)
        return pkg


@dataclass(frozen=True)
class SubPkg(PersonalKnowledgeGraph):
    """A domain- and time-restricted slice of a user's graph."""

    domain: str | None = None
    cutoff: float = math.inf

    def __post_init__(self):
        super().__post_init__()
        for t in self.triples:
            if self.domain is not None and t.object.entity_type != self.domain:
                raise PkgError(f"{t.object.iri} is not of type {self.domain!r}")
            if t.order_index > self.cutoff:
                raise PkgError(f"{t.object.iri} at {t.order_index} is past cutoff {self.cutoff}")


def add_preference(
    pkg: PersonalKnowledgeGraph, t: PreferenceTriple
) -> tuple[PersonalKnowledgeGraph, bool]:
    """Return ``(graph, redundant)``.

    A (relation, iri) pair already in the graph leaves it unchanged and sets
    ``redundant``. Otherwise the triple is inserted after every triple with an
    order_index <= its own, so ties keep insertion order.
    """
    if t.subject != pkg.user_id:
        raise PkgError(f"triple subject {t.subject!r} does not match graph user {pkg.user_id!r}")
    if any(x.key == t.key for x in pkg.triples):
        return pkg, True
    pos = bisect.bisect_right([x.order_index for x in pkg.triples], t.order_index)
    triples = pkg.triples[:pos] + (t,) + pkg.triples[pos:]
    return PersonalKnowledgeGraph(pkg.user_id, triples), False


def contains_entity(pkg: PersonalKnowledgeGraph, e: EntityRef) -> bool:
    return any(t.object.iri == e.iri for t in pkg.triples)


def query_subpkg(pkg: PersonalKnowledgeGraph, domain: str | None, cutoff: float = math.inf) -> SubPkg:
    """Triples of type ``domain`` (any type when None) with order_index <= cutoff."""
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    kept = tuple(
        t
        for t in pkg.triples
        if (domain is None or t.object.entity_type == domain) and t.order_index <= cutoff
    )
    return SubPkg(pkg.user_id, kept, domain=domain, cutoff=cutoff)


def to_prompt_json(subpkg: PersonalKnowledgeGraph) -> str:
    """Compact JSON embedded in the system prompt, e.g. ``{"32": {"liked": ["A", "B"]}}``."""
    inner: dict[str, list[str]] = {}
    for rel in RELATIONS:
        labels = [t.object.label for t in subpkg.triples if t.relation == rel]
        if labels:
            inner[rel] = labels
    return json.dumps({subpkg.user_id: inner}, ensure_ascii=False)


# -- JSON-LD -----------------------------------------------------------------

def _type_iri(entity_type: str) -> str:
    if entity_type in SCHEMA_CLASSES:
        return SCHEMA_CLASSES[entity_type]
    return "pkg:" + entity_type[:1].upper() + entity_type[1:]


def _user_node_id(user_id: str) -> str:
    return "pkg:user/" + user_id


def to_jsonld(pkg: PersonalKnowledgeGraph) -> dict[str, Any]:
    """Canonical JSON-LD document for one graph.

    Entity types become context terms mapped to schema.org classes. Each edge
    entry carries the ``orderIndex`` of the interaction that produced it and
    its ``position`` in the graph, which disambiguates ties across relations.
    """
    entity_types = sorted({t.object.entity_type for t in pkg.triples})
    context: dict[str, Any] = {
        "schema": SCHEMA_NS,
        "pkg": PKG_NS,
        "xsd": "http://www.w3.org/2001/XMLSchema#",
        "Person": "schema:Person",
        "name": "schema:name",
        "identifier": "schema:identifier",
        "orderIndex": {"@id": "pkg:orderIndex", "@type": "xsd:integer"},
        "position": {"@id": "schema:position", "@type": "xsd:integer"},
        "liked": {"@id": "pkg:liked", "@container": "@list"},
        "disliked": {"@id": "pkg:disliked", "@container": "@list"},
    }
    for et in entity_types:
        if et in context:
            raise PkgError(f"entity_type {et!r} collides with a reserved context term")
        context[et] = _type_iri(et)

    user_node: dict[str, Any] = {
        "@id": _user_node_id(pkg.user_id),
        "@type": "Person",
        "identifier": pkg.user_id,
    }
    for rel in RELATIONS:
        edges = [
            {"@id": t.object.iri, "orderIndex": t.order_index, "position": pos}
            for pos, t in enumerate(pkg.triples)
            if t.relation == rel
        ]
        if edges:
            user_node[rel] = edges
    entity_nodes = [{"@id": e.iri, "@type": e.entity_type, "name": e.label} for e in pkg.entities()]
    return {"@context": context, "@graph": [user_node] + entity_nodes}


def from_jsonld(document: Mapping[str, Any] | str) -> PersonalKnowledgeGraph:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise PkgParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(document, Mapping):
        raise PkgParseError("$", "document must be a JSON object")
    context = document.get("@context")
    if not isinstance(context, Mapping):
        raise PkgParseError("$.@context", "missing or malformed context")
    for rel in RELATIONS:
        if rel not in context:
            raise PkgParseError(f"$.@context.{rel}", "relation term not declared")
    graph = document.get("@graph")
    if not isinstance(graph, list) or not graph:
        raise PkgParseError("$.@graph", "expected a non-empty node list")

    user_nodes = []
    entities: dict[str, EntityRef] = {}
    for i, node in enumerate(graph):
        path = f"$.@graph[{i}]"
        if not isinstance(node, Mapping) or "@id" not in node:
            raise PkgParseError(path, "node must be an object with @id")
        if node.get("@type") == "Person":
            user_nodes.append((path, node))
            continue
        etype = node.get("@type")
        if not isinstance(etype, str) or etype not in context:
            raise PkgParseError(f"{path}.@type", f"undeclared entity type {etype!r}")
        label = node.get("name")
        if not isinstance(label, str) or not label:
            raise PkgParseError(f"{path}.name", "entity needs a non-empty name")
        entities[node["@id"]] = EntityRef(node["@id"], label, etype)

    if len(user_nodes) != 1:
        raise PkgParseError("$.@graph", f"expected exactly one Person node, found {len(user_nodes)}")
    upath, unode = user_nodes[0]
    user_id = unode.get("identifier")
    if not isinstance(user_id, str):
        raise PkgParseError(f"{upath}.identifier", "missing user identifier")

    triples = []
    for key, value in unode.items():
        if key in ("@id", "@type", "identifier"):
            continue
        if key not in RELATIONS:
            raise PkgParseError(f"{upath}.{key}", f"unknown relation {key!r}")
        if not isinstance(value, list):
            raise PkgParseError(f"{upath}.{key}", "edges must be a list")
        for j, edge in enumerate(value):
            epath = f"{upath}.{key}[{j}]"
            if not isinstance(edge, Mapping) or "@id" not in edge:
                raise PkgParseError(epath, "edge must reference an entity @id")
            if edge["@id"] not in entities:
                raise PkgParseError(f"{epath}.@id", f"dangling entity reference {edge['@id']!r}")
            idx = edge.get("orderIndex")
            if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
                raise PkgParseError(f"{epath}.orderIndex", "expected a non-negative integer")
            pos = edge.get("position", idx)
            if not isinstance(pos, int) or isinstance(pos, bool):
                raise PkgParseError(f"{epath}.position", "expected an integer")
            triples.append((idx, pos, PreferenceTriple(user_id, key, entities[edge["@id"]], idx)))

    triples = [t for _, _, t in sorted(triples, key=lambda x: (x[0], x[1]))]
    try:
        return PersonalKnowledgeGraph(user_id, tuple(triples))
    except PkgError as exc:
        raise PkgParseError(upath, str(exc)) from None


def save_pkg(pkg: PersonalKnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_jsonld(pkg), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_pkg(path: str | Path) -> PersonalKnowledgeGraph:
    return from_jsonld(Path(path).read_text(encoding="utf-8"))
