"""Recommendation metrics and the centralized/federated/local-only ablation grid."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .learner import BaseModel, LowRankAdapter, TrainConfig, recommend
from .pkg_store import EntityRef, PreferenceTriple, SubPkg
from .prompt_codec import extract_prompt_pkg, normalize_label, parse_completion
from .records import PreferenceExample

HITS_KS = (1, 3, 10)
TABLE_COLUMNS = ("Precision", "Recall", "F1-score", "MRR", "Hits@1", "Hits@3", "Hits@10")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalCase:
    client_id: str
    subpkg: SubPkg
    gold_items: frozenset[str]

    def __post_init__(self):
        if not self.gold_items:
            raise EvalError(f"eval case for {self.client_id} has no gold items")


@dataclass(frozen=True)
class PredictionRecord:
    case: EvalCase
    predicted_items: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.predicted_items)) != len(self.predicted_items):
            raise EvalError("predicted_items must not repeat")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    mrr: float
    hits_at: dict[int, float]
    n_cases: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mrr": self.mrr,
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "n_cases": self.n_cases,
        }

    def row(self) -> list[float]:
        return [self.precision, self.recall, self.f1, self.mrr] + [self.hits_at[k] for k in HITS_KS]

    @classmethod
    def mean(cls, reports: Sequence["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise EvalError("no reports to average")
        n = len(reports)
        return cls(
            sum(r.precision for r in reports) / n,
            sum(r.recall for r in reports) / n,
            sum(r.f1 for r in reports) / n,
            sum(r.mrr for r in reports) / n,
            {k: sum(r.hits_at[k] for r in reports) / n for k in HITS_KS},
            sum(r.n_cases for r in reports),
        )


def dedupe_normalized(labels: Sequence[str]) -> tuple[str, ...]:
    """Normalize labels and drop repeats; the first occurrence keeps its position."""
    seen: dict[str, None] = {}
    for lab in labels:
        seen.setdefault(normalize_label(lab), None)
    return tuple(seen)


def match_items(predicted: Sequence[str], gold: Sequence[str] | frozenset[str]):
    pred = set(predicted)
    gold = set(gold)
    return pred & gold, pred - gold, gold - pred


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def classification_metrics(records: Sequence[PredictionRecord], average: str = "micro") -> tuple[float, float, float]:
    """Precision, recall and F1. ``micro`` pools TP/FP/FN over all records."""
    if not records:
        raise EvalError("no prediction records")
    counts = []
    for rec in records:
        tp, fp, fn = match_items(rec.predicted_items, rec.case.gold_items)
        counts.append((len(tp), len(fp), len(fn)))
    if average == "micro":
        tp, fp, fn = (sum(c[i] for c in counts) for i in range(3))
        p, r = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
        return p, r, _f1(p, r)
    if average == "macro":
        ps = [_safe_div(tp, tp + fp) for tp, fp, _ in counts]
        rs = [_safe_div(tp, tp + fn) for tp, _, fn in counts]
        p, r = sum(ps) / len(ps), sum(rs) / len(rs)
        return p, r, _f1(p, r)
    raise EvalError(f"unknown averaging {average!r}")


def first_correct_rank(record: PredictionRecord) -> int | None:
    for i, item in enumerate(record.predicted_items, 1):
        if item in record.case.gold_items:
            return i
    return None


def ranking_metrics(records: Sequence[PredictionRecord], ks: Sequence[int] = HITS_KS) -> tuple[float, dict[int, float]]:
    if not records:
        raise EvalError("no prediction records")
    ranks = [first_correct_rank(r) for r in records]
    n = len(ranks)
    mrr = sum(1.0 / rk for rk in ranks if rk is not None) / n
    hits = {k: sum(1 for rk in ranks if rk is not None and rk <= k) / n for k in ks}
    return mrr, hits


def metrics_report(records: Sequence[PredictionRecord], average: str = "micro") -> MetricsReport:
    p, r, f1 = classification_metrics(records, average)
    mrr, hits = ranking_metrics(records)
    return MetricsReport(p, r, f1, mrr, hits, len(records))


# -- building cases -------------------------------------------------------------

def case_from_example(ex: PreferenceExample, catalog=None, domain: str = "movie") -> EvalCase:
    """Rebuild the prompt's graph and take the completion's items as gold.

    Graph labels are resolved to catalog entities when a catalog is given, so
    recommendation can exclude them; unknown labels get a placeholder iri.
    """
    user_id, rels = extract_prompt_pkg(ex.prompt)
    triples = []
    pos = 0
    for rel in ("liked", "disliked"):
        for lab in rels[rel]:
            ent = None
            if catalog is not None:
                i = catalog.index_of_label(lab)
                if i is not None:
                    ent = catalog.entities[i]
            if ent is None:
                ent = EntityRef(f"urn:label:{normalize_label(lab)}", lab, domain)
            triples.append(PreferenceTriple(user_id, rel, ent, pos))
            pos += 1
    # domain filtering is only meaningful with catalog types; keep everything otherwise
    sub = SubPkg(user_id, tuple(_dedupe_triples(triples)), domain=None)
    return EvalCase(ex.client_id, sub, frozenset(dedupe_normalized(parse_completion(ex.completion))))


def _dedupe_triples(triples):
    seen = set()
    for t in triples:
        if t.key not in seen:
            seen.add(t.key)
            yield t


def cases_from_examples(examples: Sequence[PreferenceExample], catalog=None, domain: str = "movie") -> list[EvalCase]:
    return [case_from_example(ex, catalog, domain) for ex in examples if ex.desirable]


def predict(model: BaseModel, adapter: LowRankAdapter | None, case: EvalCase, k_predict: int = 10) -> PredictionRecord:
    return PredictionRecord(case, dedupe_normalized(recommend(model, adapter, case.subpkg, k_predict)))


def evaluate(model: BaseModel, adapter: LowRankAdapter | None, testset: Sequence[EvalCase | PreferenceExample],
             k_predict: int = 10, average: str = "micro") -> MetricsReport:
    if not testset:
        raise EvalError("empty test set")
    cases = [c if isinstance(c, EvalCase) else case_from_example(c, model.catalog) for c in testset]
    return metrics_report([predict(model, adapter, c, k_predict) for c in cases], average)


# -- ablation grid ---------------------------------------------------------------

@dataclass
class AblationConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    federation: object = None  # FederationConfig
    synth: object = None  # SynthConfig
    k_predict: int = 10
    local_users: int = 10
    local_min_examples: int = 10
    seed: int = 0


def ablation_grid(dataset, model: BaseModel, cfgs: AblationConfig) -> list[dict]:
    """Centralized, federated and local-only training, each with and without synthetic data.

    Rows follow the published movie-results layout. The local-only row is
    the mean over the sampled users, each evaluated on their own held-out cases.
    """
    from .federation import FederationConfig, run_centralized, run_local_only, run_training
    from .synth_gen import SynthConfig, augment

    fed_cfg = cfgs.federation or FederationConfig()
    synth_cfg = cfgs.synth or SynthConfig(rng_seed=cfgs.seed)
    real = dataset.real_only()
    variants = [("", real), (" +Syn", augment(real, synth_cfg))]
    cases = cases_from_examples(dataset.test, model.catalog, dataset.domain)
    if not cases:
        raise EvalError("dataset has no desirable test examples")
    cases_by_client: dict[str, list[EvalCase]] = {}
    for c in cases:
        cases_by_client.setdefault(c.client_id, []).append(c)

    rows = []
    for setting in ("Centralized", "Federated", "Local-only"):
        for suffix, ds in variants:
            if setting == "Centralized":
                report = evaluate(model, run_centralized(ds, model, cfgs.train), cases, cfgs.k_predict)
            elif setting == "Federated":
                adapter, _, _ = run_training(ds, model, fed_cfg, cfgs.train)
                report = evaluate(model, adapter, cases, cfgs.k_predict)
            else:
                local = run_local_only(ds, model, cfgs.train, cfgs.local_users, cfgs.local_min_examples,
                                       rng=np.random.default_rng(cfgs.seed), candidates=cases_by_client)
                report = MetricsReport.mean(
                    [evaluate(model, ad, cases_by_client[cid], cfgs.k_predict) for cid, ad in local])
            rows.append({"model": "FedTREK-toy", "setting": setting + suffix, "metrics": report})
    return rows


# -- output ----------------------------------------------------------------------

def write_metrics(path: str | Path, report: MetricsReport, extra: Mapping | None = None) -> None:
    doc = {"schema": "fedtrek.metrics/1", **report.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema", "precision", "recall", "f1", "mrr", "hits_at", "n_cases"],
    "properties": {
        "schema": {"const": "fedtrek.metrics/1"},
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "mrr": {"type": "number", "minimum": 0, "maximum": 1},
        "hits_at": {
            "type": "object",
            "required": ["1", "3", "10"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "n_cases": {"type": "integer", "minimum": 1},
    },
}


def write_grid_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("Model", "Setting") + TABLE_COLUMNS)
        for row in rows:
            w.writerow([row["model"], row["setting"]] + [f"{v:.6f}" for v in row["metrics"].row()])


def write_grid_json(path: str | Path, rows: Sequence[dict]) -> None:
    doc = {"schema": "fedtrek.ablation/1",
           "rows": [{"model": r["model"], "setting": r["setting"], **r["metrics"].to_dict()} for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def reference_results() -> dict:
    """Published LLM-pipeline results for side-by-side display. Not reproduced here."""
    text = resources.files("fedtrek.data").joinpath("reference_results.json").read_text(encoding="utf-8")
    return json.loads(text)
