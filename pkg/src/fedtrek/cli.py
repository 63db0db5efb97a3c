"""Command-line pipelines: build-dataset, synth, train, eval, ablate, commcost.

A dataset directory holds ``train.examples.jsonl``, ``test.examples.jsonl``,
``pkgs.jsonl`` (one JSON-LD graph per line), ``catalog.json`` and
``manifest.json``. Every command writes a ``RunManifest`` next to its outputs;
timestamps appear only there, so all other outputs are byte-reproducible.

Exit codes: 0 success, 1 runtime or input error, 2 usage error.
Set ``FEDTREK_LOG_LEVEL`` to change logging verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import __version__
from .dataset_builder import (
    DatasetError,
    build_movie_dataset,
    build_recipe_dataset,
    corpus_entities,
    count_report,
    rating_entities,
    read_conversations,
    read_ratings,
)
from .eval_harness import (
    METRICS_SCHEMA,
    AblationConfig,
    EvalError,
    ablation_grid,
    cases_from_examples,
    evaluate,
    write_grid_csv,
    write_grid_json,
    write_metrics,
)
from .federation import (
    MODEL_PRESETS,
    FederationConfig,
    FederationError,
    comm_cost_report,
    run_centralized,
    run_local_only,
    run_training,
    write_ledger,
    write_rounds,
)
from .fixtures import sha256_file
from .learner import BaseModel, Catalog, LearnerError, LowRankAdapter, TrainConfig
from .pkg_store import PkgError, PkgParseError, from_jsonld, to_jsonld
from .prompt_codec import PromptError
from .records import Dataset, RecordError, read_examples, write_examples
from .synth_gen import SynthConfig, augment

logger = logging.getLogger("fedtrek")

TRAIN_FILE = "train.examples.jsonl"
TEST_FILE = "test.examples.jsonl"
PKGS_FILE = "pkgs.jsonl"
CATALOG_FILE = "catalog.json"
MANIFEST_FILE = "manifest.json"
MODES = ("federated", "centralized", "local")


class ConfigError(ValueError):
    pass


class CliError(RuntimeError):
    pass


# -- run manifest ---------------------------------------------------------------------

@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = dataclasses.field(default_factory=dict)  # path -> sha256
    outputs: list = dataclasses.field(default_factory=list)
    summary: dict = dataclasses.field(default_factory=dict)
    tool_version: str = __version__

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, path: Path) -> None:
        doc = dataclasses.asdict(self)
        doc["outputs"] = sorted(str(p) for p in self.outputs)
        doc["created_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- config -----------------------------------------------------------------------------

CONFIG_SECTIONS = {"learner": TrainConfig, "federation": FederationConfig, "synth": SynthConfig}
EVAL_DEFAULTS = {"k_predict": 10, "average": "micro", "local_users": 10, "local_min_examples": 10}
TOP_LEVEL = {"seed", "dataset", "eval"} | set(CONFIG_SECTIONS)


@dataclasses.dataclass
class RunConfig:
    seed: int
    dataset: Path | None
    learner: TrainConfig
    federation: FederationConfig
    synth: SynthConfig
    eval: dict

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": str(self.dataset) if self.dataset else None,
            "learner": dataclasses.asdict(self.learner),
            "federation": dataclasses.asdict(self.federation),
            "synth": dataclasses.asdict(self.synth),
            "eval": dict(self.eval),
        }


def _build_section(name: str, cls, values: Any, seed: int):
    if not isinstance(values, dict):
        raise ConfigError(f"config.{name}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"config.{name}.{key}: unknown field")
    kwargs = dict(values)
    kwargs.setdefault("rng_seed", seed)
    for key, val in kwargs.items():
        default = known[key].default
        if default is None:
            if val is not None and (isinstance(val, bool) or not isinstance(val, int)):
                raise ConfigError(f"config.{name}.{key}: expected an integer or null, got {val!r}")
        elif isinstance(default, str):
            if not isinstance(val, str):
                raise ConfigError(f"config.{name}.{key}: expected a string, got {val!r}")
        elif isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"config.{name}.{key}: expected a number, got {val!r}")
        elif isinstance(default, int) and not isinstance(val, int):
            raise ConfigError(f"config.{name}.{key}: expected an integer, got {val!r}")
    try:
        return cls(**kwargs)
    except (LearnerError, FederationError, ValueError) as exc:
        raise ConfigError(f"config.{name}: {exc}") from None


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a config document; unknown or ill-typed fields are named in the error."""
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    for key in doc:
        if key not in TOP_LEVEL:
            raise ConfigError(f"config.{key}: unknown section")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"config.seed: expected an integer, got {seed!r}")
    sections = {name: _build_section(name, cls, doc.get(name, {}), seed) for name, cls in CONFIG_SECTIONS.items()}
    ev = dict(EVAL_DEFAULTS)
    for key, val in doc.get("eval", {}).items():
        if key not in EVAL_DEFAULTS:
            raise ConfigError(f"config.eval.{key}: unknown field")
        if type(val) is not type(EVAL_DEFAULTS[key]):
            raise ConfigError(f"config.eval.{key}: expected {type(EVAL_DEFAULTS[key]).__name__}, got {val!r}")
        ev[key] = val
    if ev["average"] not in ("micro", "macro"):
        raise ConfigError("config.eval.average: must be 'micro' or 'macro'")
    if ev["k_predict"] < 1:
        raise ConfigError("config.eval.k_predict: must be >= 1")
    dataset = doc.get("dataset")
    if dataset is not None:
        dataset = Path(dataset)
        if base_dir is not None and not dataset.is_absolute():
            dataset = base_dir / dataset
    return RunConfig(seed, dataset, sections["learner"], sections["federation"], sections["synth"], ev)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, path.parent)


# -- dataset directories -------------------------------------------------------------------

def write_pkgs(path: Path, pkgs: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid in sorted(pkgs):
            fh.write(json.dumps(to_jsonld(pkgs[cid]), ensure_ascii=False, sort_keys=True) + "\n")


def read_pkgs(path: Path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pkg = from_jsonld(line)
            except PkgParseError as exc:
                raise CliError(f"{path}:{n}: {exc}") from None
            out[pkg.user_id] = pkg
    return out


def load_dataset_dir(path: Path) -> tuple[Dataset, BaseModel, dict]:
    path = Path(path)
    for name in (TRAIN_FILE, TEST_FILE, PKGS_FILE, CATALOG_FILE, MANIFEST_FILE):
        if not (path / name).is_file():
            raise CliError(f"dataset directory {path} is missing {name}")
    manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
    ds = Dataset(read_examples(path / TRAIN_FILE), read_examples(path / TEST_FILE),
                 read_pkgs(path / PKGS_FILE), manifest.get("summary", {}).get("domain", "movie"))
    return ds, BaseModel.load(path / CATALOG_FILE), manifest


def _dataset_inputs(man: RunManifest, path: Path) -> None:
    for name in (TRAIN_FILE, TEST_FILE, PKGS_FILE, CATALOG_FILE):
        man.add_input(path / name)


def _write_dataset_dir(out: Path, ds: Dataset, model: BaseModel, man: RunManifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_examples(out / TRAIN_FILE, ds.train)
    write_examples(out / TEST_FILE, ds.test)
    write_pkgs(out / PKGS_FILE, ds.pkgs)
    model.save(out / CATALOG_FILE)
    man.outputs += [out / n for n in (TRAIN_FILE, TEST_FILE, PKGS_FILE, CATALOG_FILE)]
    # read everything back before declaring success
    if len(read_examples(out / TRAIN_FILE)) != len(ds.train) or len(read_examples(out / TEST_FILE)) != len(ds.test):
        raise CliError("example files failed read-back validation")
    if set(read_pkgs(out / PKGS_FILE)) != set(ds.pkgs):
        raise CliError("pkgs file failed read-back validation")
    man.summary.update(count_report(ds), domain=ds.domain, train=len(ds.train), catalog_size=len(model.catalog))
    man.write(out / MANIFEST_FILE)


# -- commands ----------------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    src = Path(args.convs or args.ratings)
    if not src.is_file():
        raise CliError(f"input file not found: {src}")
    man = RunManifest("build-dataset", {"holdout": args.holdout, "embedding_dim": args.embedding_dim,
                                        "base_scale": args.base_scale},
                      {"seed": args.seed})
    man.add_input(src)
    if args.convs:
        corpus = read_conversations(src)
        ds = build_movie_dataset(corpus, args.holdout, args.seed)
        entities = corpus_entities(corpus)
    else:
        ratings = read_ratings(src)
        ds = build_recipe_dataset(ratings, args.holdout, args.seed, SynthConfig(rng_seed=args.seed))
        entities = rating_entities(ratings)
    model = BaseModel(Catalog(entities, args.embedding_dim, args.seed), base_scale=args.base_scale)
    _write_dataset_dir(Path(args.out), ds, model, man)
    s = man.summary
    print(f"wrote {s['train']} train / {s['test']} test examples for {s['clients']} clients to {args.out}")
    return 0


def cmd_synth(args) -> int:
    src = Path(args.inp)
    ds, model, _ = load_dataset_dir(src)
    cfg = SynthConfig(mask_count_per_client=args.mask_count, redundancy_count_per_client=args.redundancy_count,
                      mask_fraction=args.mask_frac, rng_seed=args.seed)
    man = RunManifest("synth", dataclasses.asdict(cfg), {"seed": args.seed})
    _dataset_inputs(man, src)
    # re-running on an augmented directory must not stack synthetic examples
    out = augment(ds.real_only(), cfg)
    _write_dataset_dir(Path(args.out), out, model, man)
    s = man.summary
    print(f"wrote {s['real']} real + {s['synthetic']} synthetic train examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset is None:
        raise ConfigError("config.dataset: required for train")
    ds, model, _ = load_dataset_dir(cfg.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(f"train --mode {args.mode}", cfg.snapshot(),
                      {"seed": cfg.seed, "learner": cfg.learner.rng_seed, "federation": cfg.federation.rng_seed})
    man.add_input(Path(args.config))
    _dataset_inputs(man, cfg.dataset)

    if args.mode == "federated":
        on_round = None
        if args.checkpoint_every:
            (out / "checkpoints").mkdir(exist_ok=True)

            def on_round(rec, adapter):
                if (rec.round_index + 1) % args.checkpoint_every == 0:
                    p = out / "checkpoints" / f"round_{rec.round_index + 1:04d}.adapter.json"
                    adapter.save(p)
                    man.outputs.append(p)

        adapter, history, ledger = run_training(ds, model, cfg.federation, cfg.learner, on_round=on_round)
        adapter.save(out / "adapter.json")
        write_rounds(out / "train.rounds.jsonl", history)
        write_ledger(out / "train.comm.json", ledger)
        man.outputs += [out / "adapter.json", out / "train.rounds.jsonl", out / "train.comm.json"]
        man.summary.update(rounds=len(history), total_bytes=ledger.total_bytes)
        LowRankAdapter.load(out / "adapter.json")
        n_lines = sum(1 for _ in open(out / "train.rounds.jsonl", encoding="utf-8"))
        if n_lines != len(history):
            raise CliError("rounds file failed read-back validation")
    elif args.mode == "centralized":
        adapter = run_centralized(ds, model, cfg.learner)
        adapter.save(out / "adapter.json")
        LowRankAdapter.load(out / "adapter.json")
        man.outputs.append(out / "adapter.json")
    else:
        cases = cases_from_examples(ds.test, model.catalog, ds.domain)
        local = run_local_only(ds, model, cfg.learner, cfg.eval["local_users"], cfg.eval["local_min_examples"],
                               rng=np.random.default_rng(cfg.seed), candidates={c.client_id for c in cases})
        (out / "adapters").mkdir(exist_ok=True)
        for cid, adapter in local:
            p = out / "adapters" / f"{cid}.adapter.json"
            adapter.save(p)
            LowRankAdapter.load(p)
            man.outputs.append(p)
        man.summary["clients"] = [cid for cid, _ in local]
    man.write(out / MANIFEST_FILE)
    print(f"{args.mode} training done; outputs in {out}")
    return 0


def _metrics_manifest_path(out: Path) -> Path:
    name = out.name[: -len(".metrics.json")] if out.name.endswith(".metrics.json") else out.stem
    return out.with_name(name + ".manifest.json")


def cmd_eval(args) -> int:
    testset = Path(args.testset)
    if not testset.is_file():
        raise CliError(f"test set not found: {testset}")
    catalog_path = Path(args.catalog) if args.catalog else testset.parent / CATALOG_FILE
    if not catalog_path.is_file():
        raise CliError(f"catalog not found: {catalog_path}")
    model = BaseModel.load(catalog_path)
    man = RunManifest("eval", {"k": args.k, "average": args.average, "adapter": args.adapter}, {})
    man.add_input(testset)
    man.add_input(catalog_path)
    if args.adapter == "base":
        adapter = None
    else:
        if not Path(args.adapter).is_file():
            raise CliError(f"adapter not found: {args.adapter}")
        adapter = LowRankAdapter.load(args.adapter)
        man.add_input(Path(args.adapter))
        if adapter.d != model.d:
            raise CliError(f"adapter dimension {adapter.d} does not match catalog dimension {model.d}")
    cases = cases_from_examples(read_examples(testset), model.catalog)
    if not cases:
        raise CliError(f"{testset} has no desirable examples to evaluate")
    report = evaluate(model, adapter, cases, args.k, args.average)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, report)
    jsonschema.validate(json.loads(out.read_text(encoding="utf-8")), METRICS_SCHEMA)
    man.outputs.append(out)
    man.write(_metrics_manifest_path(out))
    print(" ".join(f"{k}={v:.4f}" for k, v in
                   [("P", report.precision), ("R", report.recall), ("F1", report.f1), ("MRR", report.mrr)]
                   + [(f"Hits@{k}", v) for k, v in sorted(report.hits_at.items())]))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset is None:
        raise ConfigError("config.dataset: required for ablate")
    ds, model, _ = load_dataset_dir(cfg.dataset)
    out = Path(args.out) if args.out else Path(args.config).with_name(Path(args.config).stem + ".ablation")
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("ablate", cfg.snapshot(), {"seed": cfg.seed})
    man.add_input(Path(args.config))
    _dataset_inputs(man, cfg.dataset)
    acfg = AblationConfig(train=cfg.learner, federation=cfg.federation, synth=cfg.synth,
                          k_predict=cfg.eval["k_predict"], local_users=cfg.eval["local_users"],
                          local_min_examples=cfg.eval["local_min_examples"], seed=cfg.seed)
    rows = ablation_grid(ds, model, acfg)
    write_grid_csv(out / "ablation.csv", rows)
    write_grid_json(out / "ablation.json", rows)
    if len(json.loads((out / "ablation.json").read_text(encoding="utf-8"))["rows"]) != len(rows):
        raise CliError("ablation output failed read-back validation")
    man.outputs += [out / "ablation.csv", out / "ablation.json"]
    man.write(out / MANIFEST_FILE)
    for row in rows:
        m = row["metrics"]
        print(f"{row['setting']:<18} F1={m.f1:.4f} MRR={m.mrr:.4f} Hits@10={m.hits_at[10]:.4f}")
    return 0


def cmd_commcost(args) -> int:
    params = MODEL_PRESETS[args.model_preset] if args.model_preset else args.params
    cfg = FederationConfig(total_rounds=args.rounds, clients_per_round=args.clients,
                           bytes_per_param=args.bytes_per_param)
    rep = comm_cost_report(params, cfg)
    if args.json:
        print(json.dumps(rep, indent=1, sort_keys=True))
        return 0
    label = f" ({args.model_preset})" if args.model_preset else ""
    print(f"trainable parameters{label}: {params}")
    print(f"per-round client transfer, one way: {rep['per_round_client_bytes']} bytes "
          f"({rep['per_round_client_display']})")
    print(f"server total over {args.rounds} rounds x {args.clients} clients x 2 directions: "
          f"{rep['total_server_bytes']} bytes ({rep['total_server_display']})")
    print(f"{rep['per_round_client_display']} / {rep['total_server_display']}")
    return 0


# -- argument parsing ---------------------------------------------------------------------

def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must be strictly between 0 and 1, got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtrek", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedtrek {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="extract train/test examples from conversations or ratings")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--convs", help="annotated conversations (.jsonl)")
    src.add_argument("--ratings", help="recipe ratings (.jsonl)")
    b.add_argument("--out", required=True, help="output dataset directory")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--holdout", type=_fraction, default=0.1, help="fraction of eligible examples held out")
    b.add_argument("--embedding-dim", type=_positive_int, default=16)
    b.add_argument("--base-scale", type=float, default=0.1)
    b.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("synth", help="add mask and redundancy examples to a dataset directory")
    s.add_argument("--in", dest="inp", required=True, help="input dataset directory")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--mask-frac", type=_fraction, default=0.3)
    s.add_argument("--mask-count", type=_positive_int, default=2, help="mask examples per client")
    s.add_argument("--redundancy-count", type=int, default=1, help="redundancy examples per client")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an adapter")
    t.add_argument("--mode", choices=MODES, required=True)
    t.add_argument("--config", required=True, help="JSON run config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--checkpoint-every", type=_positive_int, metavar="N",
                   help="federated mode: also save the global adapter every N rounds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score an adapter on a test set")
    e.add_argument("--adapter", required=True, help="adapter checkpoint, or 'base' for the frozen model")
    e.add_argument("--testset", required=True, help="test .examples.jsonl")
    e.add_argument("--catalog", help="catalog file (default: catalog.json beside the test set)")
    e.add_argument("--k", type=_positive_int, default=10, help="items recommended per case")
    e.add_argument("--average", choices=("micro", "macro"), default="micro")
    e.add_argument("--out", required=True, help="output .metrics.json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="centralized/federated/local-only grid, with and without synthetic data")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="output directory (default: <config>.ablation beside the config)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("commcost", help="adapter communication cost")
    size = c.add_mutually_exclusive_group(required=True)
    size.add_argument("--params", type=_positive_int, help="trainable parameter count")
    size.add_argument("--model-preset", choices=sorted(MODEL_PRESETS))
    c.add_argument("--rounds", type=_positive_int, default=128)
    c.add_argument("--clients", type=_positive_int, default=4)
    c.add_argument("--bytes-per-param", type=_positive_int, default=4)
    c.add_argument("--json", action="store_true", help="print the full report as JSON")
    c.set_defaults(func=cmd_commcost)
    return p


RUNTIME_ERRORS = (CliError, ConfigError, DatasetError, RecordError, PkgError, PkgParseError, PromptError,
                  LearnerError, FederationError, EvalError, OSError, jsonschema.ValidationError)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FEDTREK_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"fedtrek {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
