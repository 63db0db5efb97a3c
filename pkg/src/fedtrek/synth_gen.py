"""Synthetic KTO examples from a client's graph: masking and redundancy penalties."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .pkg_store import PersonalKnowledgeGraph, SubPkg, query_subpkg
from .prompt_codec import PromptSpec, format_completion, render_prompt, synthetic_request
from .records import Dataset, PreferenceExample


@dataclass(frozen=True)
class SynthConfig:
    mask_count_per_client: int = 2
    redundancy_count_per_client: int = 1
    mask_fraction: float = 0.3
    rng_seed: int = 0
    max_redundancy_items: int = 10

    def __post_init__(self):
        if self.mask_count_per_client < 0 or self.redundancy_count_per_client < 0:
            raise ValueError("per-client counts must be >= 0")
        if not 0 < self.mask_fraction < 1:
            raise ValueError(f"mask_fraction must be in (0, 1), got {self.mask_fraction}")


def client_rng(seed: int, client_id: str) -> np.random.Generator:
    """Per-client stream, stable across processes (unlike ``hash``)."""
    return np.random.default_rng([int(seed), zlib.crc32(client_id.encode("utf-8"))])


def _latest_relations(pkg: PersonalKnowledgeGraph) -> dict[str, tuple]:
    """iri -> (entity, relation of its most recent triple), in first-seen order."""
    out: dict[str, tuple] = {}
    for t in pkg.triples:
        if t.object.iri in out:
            out[t.object.iri] = (out[t.object.iri][0], t.relation)
        else:
            out[t.object.iri] = (t.object, t.relation)
    return out


def _prompt(subpkg: PersonalKnowledgeGraph, domain: str) -> str:
    spec = PromptSpec.for_domain(domain, subpkg if isinstance(subpkg, SubPkg) else SubPkg(subpkg.user_id, subpkg.triples))
    spec = replace(spec, dialogue=(("user", synthetic_request(spec.item_type)),))
    return render_prompt(spec)


def mask_triples(pkg: PersonalKnowledgeGraph, cfg: SynthConfig, rng: np.random.Generator,
                 domain: str = "movie") -> list[PreferenceExample]:
    """Hide a random subset of entities and ask for them back.

    The hidden set has ceil(mask_fraction * n) entities, capped at n - 1 so the
    prompt keeps some context. An entity's label comes from its latest
    relation; a hidden set with both relations yields one example per relation.
    """
    sub = query_subpkg(pkg, domain)
    ents = _latest_relations(sub)
    n = len(ents)
    if n < 2:
        return []
    size = min(max(1, math.ceil(cfg.mask_fraction * n)), n - 1)
    iris = list(ents)
    out = []
    for k in range(cfg.mask_count_per_client):
        hidden_pos = sorted(rng.choice(n, size=size, replace=False).tolist())
        hidden = {iris[p] for p in hidden_pos}
        remainder = SubPkg(sub.user_id, tuple(t for t in sub.triples if t.object.iri not in hidden), domain=domain)
        prompt = _prompt(remainder, domain)
        for rel, label in (("liked", "desirable"), ("disliked", "undesirable")):
            group = [ents[iris[p]][0] for p in hidden_pos if ents[iris[p]][1] == rel]
            if not group:
                continue
            out.append(PreferenceExample(
                client_id=pkg.user_id,
                prompt=prompt,
                completion=format_completion([e.label for e in group]),
                label=label,
                origin="synthetic_mask",
                source_ids=(f"pkg:{pkg.user_id}", f"mask:{k}") + tuple(f"entity:{e.iri}:{rel}" for e in group),
            ))
    return out


def redundancy_negatives(pkg: PersonalKnowledgeGraph, cfg: SynthConfig, rng: np.random.Generator,
                         domain: str = "movie") -> list[PreferenceExample]:
    """Completions that repeat entities already in the prompt's graph, always undesirable."""
    sub = query_subpkg(pkg, domain)
    ents = [e for e, _ in _latest_relations(sub).values()]
    if not ents or cfg.redundancy_count_per_client == 0:
        return []
    prompt = _prompt(sub, domain)
    out = []
    for k in range(cfg.redundancy_count_per_client):
        size = int(rng.integers(1, min(len(ents), cfg.max_redundancy_items) + 1))
        picked = sorted(rng.choice(len(ents), size=size, replace=False).tolist())
        group = [ents[p] for p in picked]
        out.append(PreferenceExample(
            client_id=pkg.user_id,
            prompt=prompt,
            completion=format_completion([e.label for e in group]),
            label="undesirable",
            origin="synthetic_redundancy",
            source_ids=(f"pkg:{pkg.user_id}", f"redundancy:{k}") + tuple(f"entity:{e.iri}:redundant" for e in group),
        ))
    return out


def generate_for_client(pkg: PersonalKnowledgeGraph, cfg: SynthConfig, domain: str = "movie") -> list[PreferenceExample]:
    rng = client_rng(cfg.rng_seed, pkg.user_id)
    return mask_triples(pkg, cfg, rng, domain) + redundancy_negatives(pkg, cfg, rng, domain)


def augment(dataset: Dataset, cfg: SynthConfig) -> Dataset:
    """Add synthetic examples for every client with a graph; real and test examples are untouched."""
    synth = []
    for client in sorted(dataset.pkgs):
        synth.extend(generate_for_client(dataset.pkgs[client], cfg, dataset.domain))
    return Dataset(list(dataset.train) + synth, list(dataset.test), dict(dataset.pkgs), dataset.domain)
