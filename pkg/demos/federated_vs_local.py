"""One trial of the latent-cluster benchmark: federated training against users training alone.

Every client only sees part of its cluster, and the test items are cluster
members nobody in that client's graph mentions. A federated adapter learns the
cluster structure from everyone; a local adapter has no signal about unseen
items and lands near random.

Run: python3 demos/federated_vs_local.py [seed]   (about 15 s)
"""

import sys

from fedtrek.benchmark import BenchmarkSettings, run_trial

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
s = BenchmarkSettings()
res = run_trial(seed, s)
print(f"seed {seed}: {s.rounds} rounds, d = {s.embedding_dim}")
print(f"  Hits@{s.k} federated   {res.federated_hits:.3f}")
print(f"  Hits@{s.k} local-only  {res.local_hits:.3f}  (mean over {s.local_users} users)")
print(f"  Hits@{s.k} random      {res.random_hits:.3f}")
