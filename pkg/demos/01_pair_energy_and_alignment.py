"""Walk through the core quantities on a freshly initialized desk model:
the matrix pairs inside each block, their composed energy, and how that
energy decomposes over the upstream singular directions.
"""

import numpy as np

from cdreg import diagnostics, linalg, pairs
from cdreg.model import ModelConfig, build_model

model = build_model(ModelConfig(seed=0))
print(f"desk model: d_model={model.config.d_model}, depth={model.config.depth}, "
      f"heads={model.config.heads}")

print("\nAll pairs of the default set (A+B), composables before functionals:")
for pair in pairs.enumerate_pairs(model, "A+B"):
    w1, w2 = pairs.canonical_matrices(pair, model)
    energy = pairs.pair_energy(pair, model)
    print(f"  {pair.kind:11s} {pair.upstream:18s} -> {pair.downstream:20s} "
          f"W1 {str(w1.shape):10s} W2 {str(w2.shape):10s} energy {energy:8.3f}")

# The energy identity: composing with W1 is the same as composing with its
# left singular directions scaled by the singular values.
pair = pairs.enumerate_pairs(model, "B")[1]  # first block's FFN pair
w1, w2 = pairs.canonical_matrices(pair, model)
dec = linalg.svd(w1)
lhs = linalg.frobenius_norm_sq(linalg.matmul(w2, w1))
rhs = linalg.frobenius_norm_sq(linalg.matmul(w2, dec.u) * dec.s)
print(f"\n||W2 W1||_F^2 = {lhs:.6f}")
print(f"||W2 U S||_F^2 = {rhs:.6f}   (identical up to rounding)")

# Per-direction energy contributions: s_i^2 * ||W2 u_i||^2 sums to the total.
contrib = dec.s**2 * np.sum((w2 @ dec.u) ** 2, axis=0)
print(f"sum of per-direction terms = {contrib.sum():.6f}")
print(f"top-3 directions carry {np.sort(contrib)[-3:][::-1] / contrib.sum()}")

# Alignment scores: how much each downstream row points along each
# upstream left singular direction.
entry = diagnostics.alignment_scores(w1, w2)
print(f"\nalignment matrix shape (directions x rows): {entry.alpha.shape}")
print(f"strongest per-direction alignments: {np.sort(entry.per_direction_max)[-5:][::-1]}")
