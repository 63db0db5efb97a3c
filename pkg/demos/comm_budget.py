"""Communication budget of adapter-only federation for the three model sizes,
then the same number read off a real (tiny) training run's ledger.

Run: python3 demos/comm_budget.py
"""

from fedtrek.dataset_builder import build_movie_dataset, corpus_entities
from fedtrek.federation import MODEL_PRESETS, FederationConfig, comm_cost_report, run_training
from fedtrek.fixtures import load_movie_fixture
from fedtrek.learner import BaseModel, Catalog, TrainConfig

cfg = FederationConfig()  # 128 rounds, 4 clients per round, 32-bit values
for name, params in MODEL_PRESETS.items():
    rep = comm_cost_report(params, cfg)
    print(f"{name:>5}: {params:>11,} params  {rep['per_round_client_display']:>10} per client per round"
          f"  {rep['total_server_display']:>9} at the server")

corpus, _ = load_movie_fixture()
ds = build_movie_dataset(corpus, 0.1, 0)
model = BaseModel(Catalog(corpus_entities(corpus), 16, 0))
# the toy adapter is tiny, so bill each transfer as if it were the 0.6B adapter
cfg = FederationConfig(total_rounds=16, payload_params=MODEL_PRESETS["0.6B"])
_, history, ledger = run_training(ds, model, cfg, TrainConfig())
print(f"\n16-round run on the mini-corpus: {ledger.total_bytes:,} bytes "
      f"({ledger.total_bytes / 1024**3:.2f} GB), {len(history)} rounds logged")
