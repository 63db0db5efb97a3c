"""Federated preference fine-tuning over personal knowledge graphs, at desk scale.

The heavy language model is replaced by a low-rank-adapted bilinear scorer so
that the data pipeline, KTO objective, federated averaging, byte accounting
and evaluation can all run and be tested on a laptop.
"""

__version__ = "0.1.0"
