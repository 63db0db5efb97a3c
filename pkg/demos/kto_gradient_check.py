"""The KTO loss on a toy bilinear recommender, and a finite-difference check of its gradient.

Run: python3 demos/kto_gradient_check.py
"""

import numpy as np

from fedtrek.learner import BaseModel, Catalog, EncodedExample, TrainConfig, init_adapter, kto_loss, \
    kto_reference_point
from fedtrek.pkg_store import EntityRef

rng = np.random.default_rng(3)
cat = Catalog([EntityRef(f"urn:i:{i}", f"Item {i}", "movie") for i in range(12)], embedding_dim=6, seed=3)
model = BaseModel(cat)
cfg = TrainConfig(rank=2, beta=0.5)

adapter = init_adapter(cfg, model.d, rng)
batch = [EncodedExample(model.E[i], np.array([(i + 1) % 12]), i % 2 == 0, None) for i in range(8)]
loss, _ = kto_loss(batch, model, adapter, cfg)
print(f"fresh adapter (B = 0): loss {loss:.15f}, expected 7/12 = {7 / 12:.15f}")

# give the adapter some non-zero weights, then compare gradients
adapter.B[...] = 0.3 * rng.standard_normal(adapter.B.shape)
z = kto_reference_point(batch, model, adapter, cfg)
loss, grad = kto_loss(batch, model, adapter, cfg)
h, worst = 1e-5, 0.0
for name, g in (("A", grad.dA), ("B", grad.dB)):
    for idx in np.ndindex(g.shape):
        plus, minus = adapter.copy(), adapter.copy()
        getattr(plus, name)[idx] += h
        getattr(minus, name)[idx] -= h
        num = (kto_loss(batch, model, plus, cfg, z=z)[0] - kto_loss(batch, model, minus, cfg, z=z)[0]) / (2 * h)
        worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
print(f"reference point z = {z:.4f}, loss {loss:.4f}, worst relative gradient error {worst:.2e}")
