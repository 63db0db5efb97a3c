"""Deterministic synthetic corpora bundled with the package.

``generate_movie_corpus`` writes annotated conversations in the same shape as
ReDial-style data. The generator tracks each initiator's stated preferences
as it writes, so the manifest's label counts are fixed at generation time and
do not come from ``dataset_builder``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset_builder import ConversationLog, Mention, Message, RatingRecord, read_conversations, read_ratings
from .pkg_store import EntityRef, PersonalKnowledgeGraph, PreferenceTriple, add_preference

_ADJ = ["Silent", "Crimson", "Last", "Hidden", "Broken", "Golden", "Midnight", "Lost", "Frozen", "Burning",
        "Distant", "Electric", "Quiet", "Savage", "Hollow", "Velvet", "Iron", "Paper", "Wild", "Glass"]
_NOUN = ["Harbor", "Signal", "Garden", "Horizon", "Witness", "Empire", "Ritual", "Orchard", "Circuit", "Mirror",
         "Canyon", "Letter", "Voyage", "Shadow", "Kingdom", "Engine", "Lantern", "Island", "Parade", "Tide"]
GENRES = ("thriller", "comedy", "scifi", "drama")

MOVIE_CORPUS = "movies.convs.jsonl"
MOVIE_MANIFEST = "movies.manifest.json"
RECIPE_RATINGS = "recipes.ratings.jsonl"
RECIPE_MANIFEST = "recipes.manifest.json"


def movie_catalog(n_per_genre: int = 20, seed: int = 11) -> dict[str, list[EntityRef]]:
    rng = np.random.default_rng(seed)
    pairs = [(a, n) for a in _ADJ for n in _NOUN]
    picks = rng.choice(len(pairs), size=n_per_genre * len(GENRES), replace=False)
    out: dict[str, list[EntityRef]] = {g: [] for g in GENRES}
    for k, p in enumerate(picks):
        g = GENRES[k % len(GENRES)]
        a, n = pairs[p]
        year = int(rng.integers(1975, 2021))
        iri = f"https://example.org/movie/m{k:03d}"
        out[g].append(EntityRef(iri, f"The {a} {n} ({year})", "movie"))
    return out


class _Tracker:
    """Independent bookkeeping of what each initiator has stated so far."""

    def __init__(self):
        self.seen: dict[str, set[str]] = {}
        self.desirable = 0
        self.undesirable = 0
        self.rec_events = 0

    def rec_message(self, user: str, mentions: list[Mention]) -> None:
        known = self.seen.get(user, set())
        good = bad = False
        done = set()
        for m in mentions:
            if not m.is_recommendation or m.entity.iri in done:
                continue
            done.add(m.entity.iri)
            if m.entity.iri in known or m.sentiment == "disliked":
                bad = True
            elif m.sentiment == "liked":
                good = True
        self.rec_events += 1
        self.desirable += good
        self.undesirable += bad

    def after_message(self, user: str, mentions: list[Mention]) -> None:
        s = self.seen.setdefault(user, set())
        s.update(m.entity.iri for m in mentions if m.sentiment in ("liked", "disliked"))


def generate_movie_corpus(n_clients: int = 96, seed: int = 2024, activity: float = 1.6,
                          max_conversations: int = 9) -> tuple[list[ConversationLog], dict]:
    rng = np.random.default_rng(seed)
    catalog = movie_catalog()
    tracker = _Tracker()
    convs: list[ConversationLog] = []
    # heavy-tailed activity: most users start one or two conversations, a few many
    n_convs = np.minimum(1 + rng.zipf(activity, size=n_clients), max_conversations)
    order = []
    for ci in range(n_clients):
        order += [ci] * int(n_convs[ci])
    rng.shuffle(order)  # interleave clients; per-client order is what matters

    taste = {ci: GENRES[int(rng.integers(len(GENRES)))] for ci in range(n_clients)}
    for k, ci in enumerate(order):
        user = f"u{ci:03d}"
        g = taste[ci]
        own = catalog[g]
        other = [e for gg in GENRES if gg != g for e in catalog[gg]]
        stated = tracker.seen.setdefault(user, set())
        msgs: list[Message] = []

        def add(role, text, mentions):
            if role == "respondent" and any(m.is_recommendation for m in mentions):
                tracker.rec_message(user, mentions)
            tracker.after_message(user, mentions)
            msgs.append(Message(role, text, tuple(mentions)))

        add("respondent", "Hi there! What kind of movies are you in the mood for?", [])
        fav = [own[i] for i in rng.choice(len(own), size=int(rng.integers(1, 3)), replace=False)]
        opener = [Mention(e, False, "liked") for e in fav]
        text = "I really enjoyed " + " and ".join(e.label for e in fav) + "."
        if rng.random() < 0.4:
            bad = other[int(rng.integers(len(other)))]
            opener.append(Mention(bad, False, "disliked"))
            text += f" I did not like {bad.label} though."
        add("initiator", text, opener)

        for _ in range(int(rng.integers(1, 3))):
            recs = []
            fresh = [e for e in own if e.iri not in stated and e not in fav]
            if fresh:
                e = fresh[int(rng.integers(len(fresh)))]
                sentiment = rng.choice(["liked", "liked", "liked", "unknown", "disliked"])
                recs.append(Mention(e, True, str(sentiment)))
            if rng.random() < 0.45:
                e = other[int(rng.integers(len(other)))]
                recs.append(Mention(e, True, "disliked"))
            if stated and rng.random() < 0.25:
                iri = sorted(stated)[int(rng.integers(len(stated)))]
                e = next(x for gg in GENRES for x in catalog[gg] if x.iri == iri)
                recs.append(Mention(e, True, "liked"))
            if not recs:
                continue
            add("respondent", "You might like " + ", ".join(m.entity.label for m in recs) + ".", recs)
            reply = [Mention(m.entity, False, m.sentiment) for m in recs if m.sentiment != "unknown"]
            liked = [m.entity.label for m in reply if m.sentiment == "liked"]
            text = ("Great, " + " and ".join(liked) + " sounds good!") if liked else "Hmm, not really my thing."
            add("initiator", text, reply)
        add("initiator", "Thanks, bye!", [])
        convs.append(ConversationLog(f"c{k:04d}", user, f"r{int(rng.integers(20)):02d}", tuple(msgs)))

    manifest = {
        "generator": "fedtrek.fixtures.generate_movie_corpus",
        "seed": seed,
        "clients": len({c.initiator_id for c in convs}),
        "conversations": len(convs),
        "messages": sum(len(c.messages) for c in convs),
        "recommendation_events": tracker.rec_events,
        "real_examples": tracker.desirable + tracker.undesirable,
        "desirable_real": tracker.desirable,
        "undesirable_real": tracker.undesirable,
        "catalog_size": sum(len(v) for v in catalog.values()),
    }
    return convs, manifest


_INGREDIENTS = ["garlic", "basil", "tofu", "chicken", "lentils", "rice", "ginger", "tomato", "cheese", "mushroom",
                "lemon", "chili", "spinach", "potato", "salmon"]
_DISHES = ["Stew", "Salad", "Curry", "Bake", "Soup", "Stir-Fry", "Pie", "Risotto", "Tacos", "Skillet"]


def generate_recipe_ratings(n_users: int = 10, n_recipes: int = 30, seed: int = 7) -> tuple[list[RatingRecord], dict]:
    rng = np.random.default_rng(seed)
    recipes = []
    for i in range(n_recipes):
        ing = sorted(rng.choice(len(_INGREDIENTS), size=3, replace=False).tolist())
        name = f"{_INGREDIENTS[ing[0]].title()} {_DISHES[i % len(_DISHES)]} #{i}"
        attrs = tuple(("ingredient", _INGREDIENTS[j]) for j in ing) + (("tag", "vegetarian" if i % 3 else "meat"),)
        recipes.append((EntityRef(f"https://example.org/recipe/r{i:03d}", name, "recipe"), attrs))
    ratings = []
    users = {}
    for u in range(n_users):
        uid = f"cook{u:02d}"
        for j in rng.choice(n_recipes, size=int(rng.integers(4, 11)), replace=False):
            stars = int(rng.integers(0, 6))
            rec, attrs = recipes[int(j)]
            ratings.append(RatingRecord(uid, rec, stars, attrs))
            users.setdefault(uid, []).append(stars)
    manifest = {
        "generator": "fedtrek.fixtures.generate_recipe_ratings",
        "seed": seed,
        "users": len(users),
        "ratings": len(ratings),
        "liked": sum(s >= 4 for v in users.values() for s in v),
        "disliked": sum(s <= 2 for v in users.values() for s in v),
    }
    return ratings, manifest


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_fixtures(out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    convs, m = generate_movie_corpus()
    with open(out_dir / MOVIE_CORPUS, "w", encoding="utf-8", newline="\n") as fh:
        for c in convs:
            fh.write(json.dumps(c.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    m["sha256"] = sha256_file(out_dir / MOVIE_CORPUS)
    (out_dir / MOVIE_MANIFEST).write_text(json.dumps(m, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    ratings, rm = generate_recipe_ratings()
    with open(out_dir / RECIPE_RATINGS, "w", encoding="utf-8", newline="\n") as fh:
        for r in ratings:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    rm["sha256"] = sha256_file(out_dir / RECIPE_RATINGS)
    (out_dir / RECIPE_MANIFEST).write_text(json.dumps(rm, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def data_path(name: str) -> Path:
    return Path(str(resources.files("fedtrek.data").joinpath(name)))


def load_movie_fixture() -> tuple[list[ConversationLog], dict]:
    return read_conversations(data_path(MOVIE_CORPUS)), json.loads(data_path(MOVIE_MANIFEST).read_text())


def load_recipe_fixture() -> tuple[list[RatingRecord], dict]:
    return read_ratings(data_path(RECIPE_RATINGS)), json.loads(data_path(RECIPE_MANIFEST).read_text())


# -- latent-cluster benchmark ------------------------------------------------------

@dataclass
class ClusterBenchmark:
    """Clients drawn from latent taste clusters; each graph reveals part of its cluster.

    ``held_out`` maps client -> items from the client's cluster that never
    appear in the client's data.
    """

    entities: list[EntityRef]
    cluster_of: dict[str, int]
    pkgs: dict[str, PersonalKnowledgeGraph]
    held_out: dict[str, list[EntityRef]]
    client_cluster: dict[str, int]


def make_cluster_benchmark(n_clients: int = 40, n_clusters: int = 4, items_per_cluster: int = 15,
                           n_distractors: int = 40, reveal: int = 6, n_held_out: int = 3,
                           n_disliked: int = 2, seed: int = 0) -> ClusterBenchmark:
    rng = np.random.default_rng(seed)
    entities = []
    cluster_of = {}
    members: list[list[EntityRef]] = []
    for k in range(n_clusters):
        ms = []
        for j in range(items_per_cluster):
            e = EntityRef(f"urn:bench:c{k}i{j}", f"Cluster {k} Item {j}", "movie")
            entities.append(e)
            cluster_of[e.iri] = k
            ms.append(e)
        members.append(ms)
    distractors = [EntityRef(f"urn:bench:d{j}", f"Distractor {j}", "movie") for j in range(n_distractors)]
    entities += distractors
    for e in distractors:
        cluster_of[e.iri] = -1

    pkgs, held, ccl = {}, {}, {}
    for c in range(n_clients):
        cid = f"b{c:03d}"
        k = c % n_clusters
        ccl[cid] = k
        perm = rng.permutation(items_per_cluster)
        liked = [members[k][i] for i in perm[:reveal]]
        held[cid] = [members[k][i] for i in perm[reveal:reveal + n_held_out]]
        disliked = [distractors[i] for i in rng.choice(n_distractors, size=n_disliked, replace=False)]
        pkg = PersonalKnowledgeGraph(cid)
        events = [("liked", e) for e in liked] + [("disliked", e) for e in disliked]
        for pos in rng.permutation(len(events)):
            rel, e = events[pos]
            pkg, _ = add_preference(pkg, PreferenceTriple(cid, rel, e, len(pkg)))
        pkgs[cid] = pkg
    return ClusterBenchmark(entities, cluster_of, pkgs, held, ccl)


if __name__ == "__main__":
    write_fixtures(Path(__file__).parent / "data")
