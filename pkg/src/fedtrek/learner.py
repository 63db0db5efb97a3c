"""Low-rank-adapted preference model and the KTO objective.

The model scores catalog item ``j`` for a context vector ``c`` as

    s_j = c^T (W + (alpha / r) B A) e_j

with frozen item embeddings ``e_j`` and frozen base weights ``W``. Only the
adapter factors ``A`` (r x d) and ``B`` (d x r) are trained. A completion is
scored as independent draws from ``softmax(s)``; the frozen base (adapter
zeroed) is the KTO reference policy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .pkg_store import EntityRef, PersonalKnowledgeGraph
from .prompt_codec import extract_prompt_pkg, normalize_label, parse_completion

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class LearnerError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class Catalog:
    """Indexed entities with frozen, seed-generated unit-norm embeddings."""

    def __init__(self, entities: Sequence[EntityRef], embedding_dim: int = 16, seed: int = 0):
        self.entities = list(entities)
        self.embedding_dim = int(embedding_dim)
        self.seed = int(seed)
        self._by_iri: dict[str, int] = {}
        self._by_label: dict[str, int] = {}
        for i, e in enumerate(self.entities):
            if e.iri in self._by_iri:
                raise LearnerError(f"duplicate iri in catalog: {e.iri}")
            self._by_iri[e.iri] = i
            self._by_label.setdefault(normalize_label(e.label), i)
        rng = np.random.default_rng([self.seed, 0])
        emb = rng.standard_normal((len(self.entities), self.embedding_dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        self.item_embeddings = _frozen(emb)

    def __len__(self) -> int:
        return len(self.entities)

    def index_of_iri(self, iri: str) -> int:
        return self._by_iri[iri]

    def index_of_label(self, label: str) -> int | None:
        return self._by_label.get(normalize_label(label))

    def indices_for_labels(self, labels: Iterable[str]) -> list[int]:
        """Catalog indices of the labels that resolve; unknown labels are skipped."""
        out = []
        for lab in labels:
            i = self.index_of_label(lab)
            if i is not None:
                out.append(i)
        return out

    def to_dict(self) -> dict:
        return {
            "format": "fedtrek.catalog",
            "version": CHECKPOINT_VERSION,
            "embedding_dim": self.embedding_dim,
            "seed": self.seed,
            "entities": [{"iri": e.iri, "label": e.label, "entity_type": e.entity_type} for e in self.entities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        if d.get("format") != "fedtrek.catalog":
            raise LearnerError("not a catalog file")
        ents = [EntityRef(x["iri"], x["label"], x["entity_type"]) for x in d["entities"]]
        return cls(ents, d["embedding_dim"], d["seed"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Catalog":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class BaseModel:
    """Catalog plus the frozen d x d interaction matrix ``W``."""

    def __init__(self, catalog: Catalog, W: np.ndarray | None = None, base_scale: float = 0.1):
        self.catalog = catalog
        self.base_scale = base_scale
        d = catalog.embedding_dim
        if W is None:
            rng = np.random.default_rng([catalog.seed, 1])
            W = base_scale * rng.standard_normal((d, d))
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (d, d):
            raise LearnerError(f"W must be {d}x{d}, got {W.shape}")
        self.W = _frozen(W)

    @property
    def d(self) -> int:
        return self.catalog.embedding_dim

    def to_dict(self) -> dict:
        """Catalog file contents; ``W`` is regenerated from the seed, never stored."""
        return {**self.catalog.to_dict(), "base_scale": self.base_scale}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BaseModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(Catalog.from_dict(d), base_scale=d.get("base_scale", 0.1))

    @property
    def E(self) -> np.ndarray:
        return self.catalog.item_embeddings


@dataclass
class LowRankAdapter:
    A: np.ndarray  # r x d
    B: np.ndarray  # d x r
    alpha: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        r, d = self.A.shape
        if r < 1:
            raise LearnerError("adapter rank must be >= 1")
        if self.B.shape != (d, r):
            raise LearnerError(f"B must be {d}x{r}, got {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def update_matrix(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.A.copy(), self.B.copy(), self.alpha)

    def zeroed(self) -> "LowRankAdapter":
        return LowRankAdapter(self.A.copy(), np.zeros_like(self.B), self.alpha)

    def apply(self, delta: "AdapterDelta") -> "LowRankAdapter":
        return LowRankAdapter(self.A + delta.dA, self.B + delta.dB, self.alpha)

    def to_dict(self) -> dict:
        return {
            "format": "fedtrek.adapter",
            "version": CHECKPOINT_VERSION,
            "rank": self.rank,
            "d": self.d,
            "alpha": self.alpha,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LowRankAdapter":
        if d.get("format") != "fedtrek.adapter":
            raise LearnerError("not an adapter checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise LearnerError(f"unsupported adapter checkpoint version {d.get('version')}")
        a = cls(np.array(d["A"], dtype=np.float64).reshape(d["rank"], d["d"]),
                np.array(d["B"], dtype=np.float64).reshape(d["d"], d["rank"]), d["alpha"])
        return a

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LowRankAdapter":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class AdapterDelta:
    dA: np.ndarray
    dB: np.ndarray
    example_count: int = 0

    @classmethod
    def zeros_like(cls, adapter: LowRankAdapter, example_count: int = 0) -> "AdapterDelta":
        return cls(np.zeros_like(adapter.A), np.zeros_like(adapter.B), example_count)

    def to_dict(self) -> dict:
        return {"dA": self.dA.tolist(), "dB": self.dB.tolist(), "example_count": self.example_count}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterDelta":
        return cls(np.array(d["dA"], dtype=np.float64), np.array(d["dB"], dtype=np.float64), d["example_count"])


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    lambda_desirable: float = 4 / 3
    lambda_undesirable: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 8
    rng_seed: int = 0
    rank: int = 16
    alpha: float = 64.0
    init_scale: float = 0.25  # about 1/sqrt(d) at the default d = 16

    def __post_init__(self):
        if self.beta <= 0:
            raise LearnerError("beta must be > 0")
        if self.lambda_undesirable <= 0 or self.lambda_desirable <= 0:
            raise LearnerError("KTO weights must be positive")
        ratio = self.lambda_desirable / self.lambda_undesirable
        if not (3 / 4 - 1e-12 <= ratio <= 4 / 3 + 1e-12):
            raise LearnerError(f"lambda_desirable/lambda_undesirable = {ratio:.4f} outside [3/4, 4/3]")
        if self.epochs < 0 or self.batch_size < 1 or self.rank < 1:
            raise LearnerError("epochs >= 0, batch_size >= 1 and rank >= 1 required")


@dataclass
class EncodedExample:
    """A training example resolved against the catalog."""

    context: np.ndarray
    items: np.ndarray
    desirable: bool
    source: object = field(default=None, repr=False)


def init_adapter(cfg: TrainConfig, d: int, rng: np.random.Generator) -> LowRankAdapter:
    """Gaussian ``A``, zero ``B``: the initial update is exactly zero."""
    A = cfg.init_scale * rng.standard_normal((cfg.rank, d))
    return LowRankAdapter(A, np.zeros((d, cfg.rank)), cfg.alpha)


# -- scoring -------------------------------------------------------------------

def _context_from_indices(model: BaseModel, liked: Sequence[int], disliked: Sequence[int]) -> np.ndarray:
    E = model.E
    c = np.zeros(model.d)
    if len(liked):
        c += E[list(liked)].mean(axis=0)
    if len(disliked):
        c -= E[list(disliked)].mean(axis=0)
    return c


def context_embedding(model: BaseModel, subpkg: PersonalKnowledgeGraph) -> np.ndarray:
    """Mean liked embedding minus mean disliked embedding; entities outside the catalog are ignored."""
    liked, disliked = [], []
    for t in subpkg.triples:
        i = model.catalog._by_iri.get(t.object.iri)
        if i is None:
            i = model.catalog.index_of_label(t.object.label)
        if i is not None:
            (liked if t.relation == "liked" else disliked).append(i)
    return _context_from_indices(model, liked, disliked)


def _effective(model: BaseModel, adapter: LowRankAdapter | None) -> np.ndarray:
    if adapter is None:
        return model.W
    return model.W + adapter.update_matrix()


def all_scores(model: BaseModel, adapter: LowRankAdapter | None, context: np.ndarray) -> np.ndarray:
    return model.E @ (_effective(model, adapter).T @ context)


def score(model: BaseModel, adapter: LowRankAdapter | None, context: np.ndarray, item_index: int) -> float:
    n = len(model.catalog)
    if not 0 <= item_index < n:
        raise IndexError(f"item index {item_index} outside catalog of size {n}")
    return float(context @ _effective(model, adapter) @ model.E[item_index])


def _check_items(model: BaseModel, items: Sequence[int]) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        raise LearnerError("items must be non-empty")
    n = len(model.catalog)
    if items.min() < 0 or items.max() >= n:
        raise LearnerError(f"unknown item index in {items.tolist()} (catalog size {n})")
    return items


def policy_logprob(model: BaseModel, adapter: LowRankAdapter | None, context: np.ndarray,
                   items: Sequence[int]) -> float:
    """Sum of log-softmax probabilities of ``items`` over the full catalog."""
    items = _check_items(model, items)
    s = all_scores(model, adapter, context)
    return float(s[items].sum() - items.size * logsumexp(s))


def reference_logprob(model: BaseModel, context: np.ndarray, items: Sequence[int]) -> float:
    return policy_logprob(model, None, context, items)


def recommend(model: BaseModel, adapter: LowRankAdapter | None, subpkg: PersonalKnowledgeGraph,
              k: int) -> list[str]:
    """Top-k labels by score, skipping anything already in ``subpkg``; ties go to the lower index."""
    if k < 1:
        raise LearnerError("k must be >= 1")
    return [model.catalog.entities[i].label for i in recommend_indices(model, adapter, subpkg, k)]


def recommend_indices(model: BaseModel, adapter: LowRankAdapter | None, subpkg: PersonalKnowledgeGraph,
                      k: int) -> list[int]:
    cat = model.catalog
    excluded = set()
    for t in subpkg.triples:
        i = cat._by_iri.get(t.object.iri)
        if i is None:
            i = cat.index_of_label(t.object.label)
        if i is not None:
            excluded.add(i)
    s = all_scores(model, adapter, context_embedding(model, subpkg))
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order if int(i) not in excluded][:k]


# -- KTO -------------------------------------------------------------------------

def encode_example(model: BaseModel, example) -> EncodedExample | None:
    """Resolve a PreferenceExample's prompt graph and completion against the catalog.

    Returns None when no completion item is in the catalog.
    """
    items = model.catalog.indices_for_labels(parse_completion(example.completion))
    if not items:
        return None
    _, rels = extract_prompt_pkg(example.prompt)
    cat = model.catalog
    ctx = _context_from_indices(model, cat.indices_for_labels(rels["liked"]),
                                cat.indices_for_labels(rels["disliked"]))
    return EncodedExample(ctx, np.asarray(items, dtype=np.int64), example.label == "desirable", example)


def encode_examples(model: BaseModel, examples: Iterable) -> list[EncodedExample]:
    out = []
    for ex in examples:
        enc = encode_example(model, ex)
        if enc is not None:
            out.append(enc)
    return out


def _logprob_and_grad_dir(model: BaseModel, M: np.ndarray, context: np.ndarray, items: np.ndarray):
    """log p(items | context) under effective matrix M, and g with d logp / dM = outer(context, g)."""
    E = model.E
    s = E @ (M.T @ context)
    lse = logsumexp(s)
    p = np.exp(s - lse)
    logp = s[items].sum() - items.size * lse
    g = E[items].sum(axis=0) - items.size * (p @ E)
    return logp, g


def kto_reference_point(batch: Sequence[EncodedExample], model: BaseModel, adapter: LowRankAdapter,
                        cfg: TrainConfig) -> float:
    """KL reference point: mean reward of prompts paired with the next example's completion, clamped at 0."""
    n = len(batch)
    if n < 2:
        return 0.0
    M = _effective(model, adapter)
    W = model.W
    total = 0.0
    for i in range(n):
        ctx, items = batch[i].context, batch[(i + 1) % n].items
        lp, _ = _logprob_and_grad_dir(model, M, ctx, items)
        lr, _ = _logprob_and_grad_dir(model, W, ctx, items)
        total += cfg.beta * (lp - lr)
    return max(0.0, total / n)


def kto_loss(batch: Sequence[EncodedExample], model: BaseModel, adapter: LowRankAdapter, cfg: TrainConfig,
             z: float | None = None) -> tuple[float, AdapterDelta]:
    """KTO loss and its exact gradient w.r.t. the adapter factors.

    ``z`` is estimated from the batch when not given and is held constant for
    differentiation.
    """
    if not batch:
        raise LearnerError("empty batch")
    n = len(batch)
    if z is None:
        z = kto_reference_point(batch, model, adapter, cfg)
    M = _effective(model, adapter)
    lam_d, lam_u = cfg.lambda_desirable, cfg.lambda_undesirable

    loss = 0.0
    G = np.zeros((model.d, model.d))
    for ex in batch:
        lp, g = _logprob_and_grad_dir(model, M, ex.context, ex.items)
        lr, _ = _logprob_and_grad_dir(model, model.W, ex.context, ex.items)
        r = cfg.beta * (lp - lr)
        if ex.desirable:
            sig = expit(r - z)
            loss += lam_d - lam_d * sig
            dl_dr = -lam_d * sig * (1.0 - sig)
        else:
            sig = expit(z - r)
            loss += lam_u - lam_u * sig
            dl_dr = lam_u * sig * (1.0 - sig)
        G += (dl_dr * cfg.beta / n) * np.outer(ex.context, g)
    loss /= n

    s = adapter.scale
    grad = AdapterDelta(s * (adapter.B.T @ G), s * (G @ adapter.A.T), n)
    return float(loss), grad


def train_local(examples: Sequence, model: BaseModel, adapter: LowRankAdapter, cfg: TrainConfig) -> AdapterDelta:
    """Mini-batch gradient descent on the KTO loss; returns final minus initial parameters.

    ``examples`` may be PreferenceExamples or already-encoded examples.
    """
    batch_pool = [e if isinstance(e, EncodedExample) else encode_example(model, e) for e in examples]
    batch_pool = [e for e in batch_pool if e is not None]
    if not batch_pool or cfg.epochs == 0:
        return AdapterDelta.zeros_like(adapter, len(batch_pool))

    rng = np.random.default_rng(cfg.rng_seed)
    A, B = adapter.A.copy(), adapter.B.copy()
    cur = LowRankAdapter(A, B, adapter.alpha)
    n = len(batch_pool)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [batch_pool[i] for i in order[start:start + cfg.batch_size]]
            loss, grad = kto_loss(batch, model, cur, cfg)
            cur = LowRankAdapter(cur.A - cfg.learning_rate * grad.dA, cur.B - cfg.learning_rate * grad.dB,
                                 cur.alpha)
        logger.debug("epoch %d last-batch loss %.6f", epoch, loss)
    return AdapterDelta(cur.A - adapter.A, cur.B - adapter.B, n)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, rng_seed=int(seed))
