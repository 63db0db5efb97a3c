"""Communication rounds: client selection, broadcast, local KTO, FedAvg and byte accounting."""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .learner import (
    AdapterDelta,
    BaseModel,
    LowRankAdapter,
    TrainConfig,
    encode_examples,
    init_adapter,
    train_local,
    with_seed,
)
from .records import Dataset, PreferenceExample

logger = logging.getLogger(__name__)

AGGREGATIONS = ("fedavg_weighted", "fedavg_uniform")

# trainable parameter counts of rank-16 LoRA adapters on Qwen3 base models
MODEL_PRESETS = {"0.6B": 10_093_000, "1.7B": 17_433_000, "4B": 33_030_000}


class FederationError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    total_rounds: int = 128
    clients_per_round: int = 4
    aggregation: str = "fedavg_weighted"
    bytes_per_param: int = 4
    rng_seed: int = 0
    # parameters priced per adapter transfer; None means the adapter's own size
    payload_params: int | None = None
    workers: int = 1

    def __post_init__(self):
        # zero rounds is a valid no-op run
        if self.total_rounds < 0:
            raise FederationError("total_rounds must be >= 0")
        if self.clients_per_round < 1:
            raise FederationError("clients_per_round must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise FederationError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.bytes_per_param < 1:
            raise FederationError("bytes_per_param must be >= 1")


@dataclass
class RoundRecord:
    round_index: int
    selected_clients: list[str]
    deltas: list[AdapterDelta]
    weights: list[float]
    download_bytes: int
    upload_bytes: int

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "selected_clients": list(self.selected_clients),
            "example_counts": [d.example_count for d in self.deltas],
            "delta_norms": [float(np.sqrt(np.sum(d.dA ** 2) + np.sum(d.dB ** 2))) for d in self.deltas],
            "weights": list(self.weights),
            "download_bytes": self.download_bytes,
            "upload_bytes": self.upload_bytes,
        }


@dataclass
class CommLedger:
    entries: list[dict] = field(default_factory=list)

    def record(self, round_index: int, client_id: str, direction: str, nbytes: int) -> None:
        self.entries.append({"round_index": round_index, "client_id": client_id,
                             "direction": direction, "bytes": int(nbytes)})

    @property
    def download_bytes(self) -> int:
        return sum(e["bytes"] for e in self.entries if e["direction"] == "download")

    @property
    def upload_bytes(self) -> int:
        return sum(e["bytes"] for e in self.entries if e["direction"] == "upload")

    @property
    def total_bytes(self) -> int:
        return sum(e["bytes"] for e in self.entries)

    def per_round(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e["round_index"]] = out.get(e["round_index"], 0) + e["bytes"]
        return out

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "per_round_bytes": {str(k): v for k, v in sorted(self.per_round().items())},
            "download_bytes": self.download_bytes,
            "upload_bytes": self.upload_bytes,
            "total_bytes": self.total_bytes,
        }


def _stable_id(client_id: str) -> int:
    return zlib.crc32(client_id.encode("utf-8"))


def derive_seed(seed: int, round_index: int, client_id: str, stream: int = 0) -> int:
    """Training seed for one client job; ``stream`` separates federated from local-only runs."""
    entropy = [int(seed), int(stream), int(round_index), _stable_id(client_id)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def select_clients(round_index: int, pool: Sequence[str], cfg: FederationConfig,
                   rng: np.random.Generator | None = None) -> list[str]:
    """Uniform sample without replacement, seeded by (rng_seed, round_index); returned sorted."""
    pool = sorted(set(pool))
    if len(pool) < cfg.clients_per_round:
        raise FederationError(f"pool of {len(pool)} clients is smaller than clients_per_round={cfg.clients_per_round}")
    if rng is None:
        rng = np.random.default_rng([cfg.rng_seed, round_index])
    picked = rng.choice(len(pool), size=cfg.clients_per_round, replace=False)
    return sorted(pool[i] for i in picked)


def aggregation_weights(deltas: Sequence[AdapterDelta], scheme: str) -> list[float]:
    n = len(deltas)
    counts = np.array([d.example_count for d in deltas], dtype=np.float64)
    if scheme == "fedavg_weighted" and counts.sum() > 0:
        return (counts / counts.sum()).tolist()
    if scheme not in AGGREGATIONS:
        raise FederationError(f"unknown aggregation {scheme!r}")
    return [1.0 / n] * n


def aggregate(deltas: Sequence[AdapterDelta], cfg: FederationConfig) -> AdapterDelta:
    """Weighted componentwise average of client deltas.

    The result does not depend on input order: deltas are combined in a
    canonical order keyed on their contents.
    """
    if not deltas:
        raise FederationError("nothing to aggregate")
    shape_a, shape_b = deltas[0].dA.shape, deltas[0].dB.shape
    for d in deltas:
        if d.dA.shape != shape_a or d.dB.shape != shape_b:
            raise FederationError(f"delta shape mismatch: {d.dA.shape}/{d.dB.shape} vs {shape_a}/{shape_b}")
    weights = aggregation_weights(deltas, cfg.aggregation)
    # float addition is not associative; sort so permuted inputs sum identically
    order = sorted(range(len(deltas)),
                   key=lambda i: (weights[i], deltas[i].example_count, deltas[i].dA.tobytes(), deltas[i].dB.tobytes()))
    dA = np.zeros(shape_a)
    dB = np.zeros(shape_b)
    for i in order:
        dA += weights[i] * deltas[i].dA
        dB += weights[i] * deltas[i].dB
    # keep the convex-combination bounds exact despite rounding
    stack_a = np.stack([d.dA for d in deltas])
    stack_b = np.stack([d.dB for d in deltas])
    dA = np.clip(dA, stack_a.min(axis=0), stack_a.max(axis=0))
    dB = np.clip(dB, stack_b.min(axis=0), stack_b.max(axis=0))
    return AdapterDelta(dA, dB, int(sum(d.example_count for d in deltas)))


class Client:
    """Holds one client's examples; the orchestrator only ever sees its deltas."""

    def __init__(self, client_id: str, examples: Sequence[PreferenceExample], model: BaseModel,
                 train_cfg: TrainConfig):
        self.client_id = client_id
        self._train_cfg = train_cfg
        self._model = model
        self._encoded = encode_examples(model, examples)

    @property
    def example_count(self) -> int:
        return len(self._encoded)

    def train(self, global_adapter: LowRankAdapter, seed: int) -> AdapterDelta:
        return train_local(self._encoded, self._model, global_adapter, with_seed(self._train_cfg, seed))


def make_clients(dataset: Dataset, model: BaseModel, train_cfg: TrainConfig) -> dict[str, Client]:
    return {cid: Client(cid, exs, model, train_cfg) for cid, exs in dataset.by_client().items()}


def fresh_adapter(model: BaseModel, train_cfg: TrainConfig) -> LowRankAdapter:
    return init_adapter(train_cfg, model.d, np.random.default_rng([train_cfg.rng_seed, 7]))


def run_training(
    dataset: Dataset | Mapping[str, Client],
    model: BaseModel,
    cfg: FederationConfig,
    train_cfg: TrainConfig,
    initial: LowRankAdapter | None = None,
    on_round: Callable[[RoundRecord, LowRankAdapter], None] | None = None,
) -> tuple[LowRankAdapter, list[RoundRecord], CommLedger]:
    """Federated rounds: select, broadcast, train locally, upload, aggregate."""
    clients = make_clients(dataset, model, train_cfg) if isinstance(dataset, Dataset) else dict(dataset)
    adapter = initial.copy() if initial is not None else fresh_adapter(model, train_cfg)
    params = cfg.payload_params if cfg.payload_params is not None else adapter.num_params
    per_transfer = params * cfg.bytes_per_param
    history: list[RoundRecord] = []
    ledger = CommLedger()
    pool = sorted(clients)
    pool_exec = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for rnd in range(cfg.total_rounds):
            selected = select_clients(rnd, pool, cfg)
            for cid in selected:
                ledger.record(rnd, cid, "download", per_transfer)
            seeds = [derive_seed(train_cfg.rng_seed, rnd, cid) for cid in selected]
            broadcast = adapter.copy()
            if pool_exec is None:
                deltas = [clients[cid].train(broadcast, s) for cid, s in zip(selected, seeds)]
            else:
                deltas = list(pool_exec.map(lambda cs: clients[cs[0]].train(broadcast, cs[1]), zip(selected, seeds)))
            for cid in selected:
                ledger.record(rnd, cid, "upload", per_transfer)
            update = aggregate(deltas, cfg)
            adapter = adapter.apply(update)
            rec = RoundRecord(rnd, selected, deltas, aggregation_weights(deltas, cfg.aggregation),
                              per_transfer * len(selected), per_transfer * len(selected))
            history.append(rec)
            if on_round is not None:
                on_round(rec, adapter)
            logger.debug("round %d clients=%s", rnd, selected)
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    return adapter, history, ledger


def run_centralized(dataset: Dataset, model: BaseModel, train_cfg: TrainConfig,
                    initial: LowRankAdapter | None = None) -> LowRankAdapter:
    """Train once on the union of all clients' examples."""
    adapter = initial.copy() if initial is not None else fresh_adapter(model, train_cfg)
    pooled = [ex for exs in dataset.by_client().values() for ex in exs]
    return adapter.apply(train_local(pooled, model, adapter, train_cfg))


def run_local_only(
    dataset: Dataset,
    model: BaseModel,
    train_cfg: TrainConfig,
    n_users: int = 10,
    min_examples: int = 10,
    rng: np.random.Generator | None = None,
    candidates: Iterable[str] | None = None,
) -> list[tuple[str, LowRankAdapter]]:
    """Train isolated adapters for ``n_users`` random clients with >= ``min_examples`` examples."""
    by_client = dataset.by_client()
    allowed = set(candidates) if candidates is not None else set(by_client)
    eligible = sorted(c for c, exs in by_client.items() if len(exs) >= min_examples and c in allowed)
    if len(eligible) < n_users:
        raise FederationError(f"only {len(eligible)} clients have >= {min_examples} examples; need {n_users}")
    rng = rng if rng is not None else np.random.default_rng(train_cfg.rng_seed)
    picked = sorted(eligible[i] for i in rng.choice(len(eligible), size=n_users, replace=False))
    out = []
    for cid in picked:
        start = fresh_adapter(model, train_cfg)
        cfg = with_seed(train_cfg, derive_seed(train_cfg.rng_seed, 0, cid, stream=1))
        out.append((cid, start.apply(train_local(by_client[cid], model, start, cfg))))
    return out


# -- communication cost -------------------------------------------------------------

MiB = 1024 ** 2
GiB = 1024 ** 3


def comm_cost_report(trainable_params: int, cfg: FederationConfig) -> dict:
    """One-way per-client transfer and the server's cumulative load over all rounds."""
    if trainable_params <= 0:
        raise FederationError("trainable_params must be > 0")
    per_client = trainable_params * cfg.bytes_per_param
    total = per_client * 2 * cfg.clients_per_round * cfg.total_rounds
    return {
        "trainable_params": trainable_params,
        "bytes_per_param": cfg.bytes_per_param,
        "clients_per_round": cfg.clients_per_round,
        "total_rounds": cfg.total_rounds,
        "per_round_client_bytes": per_client,
        "total_server_bytes": total,
        "per_round_client_mb": per_client / MiB,
        "total_server_gb": total / GiB,
        "per_round_client_display": f"{per_client / MiB:.2f} MB",
        "total_server_display": f"{total / GiB:.1f} GB",
    }


def write_rounds(path: str | Path, history: Sequence[RoundRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def write_ledger(path: str | Path, ledger: CommLedger) -> None:
    Path(path).write_text(json.dumps(ledger.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
