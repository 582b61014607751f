"""Matching-oriented product quantization toolkit.

Joint training of a dense encoder and product-quantization codebooks under a
contrastive objective with straight-through hard assignment, a deterministic
simulation of cross-device negative sharing with a gradient-equivalence
oracle, classical baselines (reconstruction-loss joint training, k-means
codebooks), ADC retrieval, and runnable constructions of the quantization
invariance claims. Served over HTTP by ``mopq.service`` with ``mopq.cli`` as
a thin client.
"""

__version__ = "0.1.0"
