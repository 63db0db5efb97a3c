"""Independent reimplementations used as test oracles.

Nothing here imports the code under test beyond plain data types, so a bug
in the library cannot leak into its own check.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from fedtrek.learner import AdapterDelta, BaseModel, Catalog, EncodedExample, LowRankAdapter, TrainConfig
from fedtrek.pkg_store import EntityRef


# -- learner ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, d=None, r=None, n_items=None, batch=None):
    """Small model, non-trivial adapter and a mixed-label encoded batch."""
    d = d or int(rng.integers(2, 9))
    r = r or int(rng.integers(1, 5))
    n_items = n_items or int(rng.integers(3, 21))
    batch = batch or int(rng.integers(2, 7))
    cat = Catalog([EntityRef(f"urn:i:{i}", f"Item {i}", "movie") for i in range(n_items)], d,
                  int(rng.integers(1 << 30)))
    model = BaseModel(cat, W=0.5 * rng.standard_normal((d, d)))
    adapter = LowRankAdapter(0.5 * rng.standard_normal((r, d)), 0.5 * rng.standard_normal((d, r)),
                             float(rng.uniform(0.5, 8)))
    labels = [True, False] + [bool(rng.integers(2)) for _ in range(batch - 2)]
    exs = []
    for lab in labels:
        k = int(rng.integers(1, min(4, n_items) + 1))
        items = rng.choice(n_items, size=k, replace=False)
        exs.append(EncodedExample(rng.standard_normal(d), np.asarray(items), lab, None))
    cfg = TrainConfig(beta=float(rng.uniform(0.05, 2.0)))
    return model, adapter, exs, cfg


def log_softmax_sum(scores, items) -> float:
    m = max(scores)
    lse = m + math.log(sum(math.exp(s - m) for s in scores))
    return sum(scores[i] - lse for i in items)


def brute_scores(model: BaseModel, adapter: LowRankAdapter | None, context) -> list[float]:
    d = model.d
    M = [[float(model.W[i][j]) for j in range(d)] for i in range(d)]
    if adapter is not None:
        s = adapter.alpha / adapter.rank
        for i in range(d):
            for j in range(d):
                M[i][j] += s * sum(float(adapter.B[i][k]) * float(adapter.A[k][j]) for k in range(adapter.rank))
    out = []
    for e in model.E:
        out.append(sum(float(context[i]) * M[i][j] * float(e[j]) for i in range(d) for j in range(d)))
    return out


def kto_loss_fixed_z(batch, model, adapter, cfg, z) -> float:
    """Plain-python KTO loss with a fixed reference point."""
    total = 0.0
    for ex in batch:
        pol = log_softmax_sum(brute_scores(model, adapter, ex.context), ex.items)
        ref = log_softmax_sum(brute_scores(model, None, ex.context), ex.items)
        r = cfg.beta * (pol - ref)
        if ex.desirable:
            total += cfg.lambda_desirable * (1 - 1 / (1 + math.exp(-(r - z))))
        else:
            total += cfg.lambda_undesirable * (1 - 1 / (1 + math.exp(-(z - r))))
    return total / len(batch)


def fd_gradient(loss_fn, adapter: LowRankAdapter, h=1e-5) -> AdapterDelta:
    """Central differences of ``loss_fn(adapter)`` over every coordinate of A and B."""
    grads = []
    for name in ("A", "B"):
        base = getattr(adapter, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = adapter.copy(), adapter.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
        grads.append(g)
    return AdapterDelta(grads[0], grads[1])


def max_relative_error(analytic: AdapterDelta, numeric: AdapterDelta, floor=1e-6) -> float:
    a = np.concatenate([analytic.dA.ravel(), analytic.dB.ravel()])
    n = np.concatenate([numeric.dA.ravel(), numeric.dB.ravel()])
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# -- metrics ---------------------------------------------------------------------------

def exact_metrics(pairs, ks=(1, 3, 10)) -> dict:
    """Micro P/R/F1, MRR and Hits@k as Fractions from (predicted list, gold set) pairs."""
    tp = fp = fn = 0
    rr = Fraction(0)
    hits = {k: 0 for k in ks}
    for pred, gold in pairs:
        tp += sum(1 for p in pred if p in gold)
        fp += sum(1 for p in pred if p not in gold)
        fn += sum(1 for g in gold if g not in pred)
        rank = next((i + 1 for i, p in enumerate(pred) if p in gold), None)
        if rank is not None:
            rr += Fraction(1, rank)
            for k in ks:
                hits[k] += rank <= k
    n = len(pairs)
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return {"precision": p, "recall": r, "f1": f1, "mrr": rr / n, **{f"hits@{k}": Fraction(hits[k], n) for k in ks}}


# -- dataset labelling rules -------------------------------------------------------------

def brute_force_labels(corpus) -> list[tuple]:
    """Label every recommendation message straight from the annotation rules.

    Returns sorted (client, conversation, message index, label, sorted iris)
    tuples. A recommended entity already stated by the client earlier (either
    sentiment) is undesirable, a disliked one is undesirable, a liked one is
    desirable, an unknown one is skipped.
    """
    out = []
    stated: dict[str, set] = {}
    for conv in corpus:  # corpus order is chronological per client
        known = stated.setdefault(conv.initiator_id, set())
        for i, msg in enumerate(conv.messages):
            if msg.role == "respondent":
                good, bad, done = [], [], set()
                for m in msg.mentions:
                    if not m.is_recommendation or m.entity.iri in done:
                        continue
                    done.add(m.entity.iri)
                    if m.entity.iri in known or m.sentiment == "disliked":
                        bad.append(m.entity.iri)
                    elif m.sentiment == "liked":
                        good.append(m.entity.iri)
                if good:
                    out.append((conv.initiator_id, conv.conversation_id, i, "desirable", tuple(sorted(good))))
                if bad:
                    out.append((conv.initiator_id, conv.conversation_id, i, "undesirable", tuple(sorted(bad))))
            # this message's own statements only count for later messages
            known.update(m.entity.iri for m in msg.mentions if m.sentiment in ("liked", "disliked"))
    return sorted(out)


# -- recommendation ----------------------------------------------------------------------

def brute_recommend(model: BaseModel, subpkg, k: int) -> list[str]:
    """Base-model top-k straight from the definition, label lookup by normalized text."""
    from fedtrek.prompt_codec import normalize_label

    by_label = {}
    for i, e in enumerate(model.catalog.entities):
        by_label.setdefault(normalize_label(e.label), i)
    liked, disliked = [], []
    for t in subpkg.triples:
        i = by_label.get(normalize_label(t.object.label))
        if i is not None:
            (liked if t.relation == "liked" else disliked).append(i)
    ctx = [0.0] * model.d
    for group, sign in ((liked, 1.0), (disliked, -1.0)):
        for j in range(model.d):
            if group:
                ctx[j] += sign * sum(float(model.E[i][j]) for i in group) / len(group)
    scores = brute_scores(model, None, ctx)
    seen = set(liked + disliked)
    order = sorted((i for i in range(len(scores)) if i not in seen), key=lambda i: (-scores[i], i))
    return [normalize_label(model.catalog.entities[i].label) for i in order[:k]]
