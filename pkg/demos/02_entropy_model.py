"""Inside the entropy model: mixture masses, causal weights, range coding.

Walks through the three stages that turn a latent value into bits:
  1. a discretized Gaussian mixture gives each integer value a probability,
  2. the causal weight field pools already-decoded positions into a
     global mean/std context (gated below a minimum causal count),
  3. the range coder turns the per-value probabilities into bytes.
"""

import numpy as np

from jointiq.entropy import (build_weight_field, global_context_E3, gmm_pmf,
                             gmm_pmf_table, value_to_symbol)
from jointiq.rangecoder import RangeDecoder, RangeEncoder, build_cdf

# 1. mixture mass per integer bin
pi, mu, sigma = [0.5, 0.3, 0.2], [-1.0, 0.0, 2.0], [0.5, 1.0, 2.0]
print("mixture mass per bin:")
for n in (-2, -1, 0, 1, 2):
    print(f"  value {n:+d}: {gmm_pmf(pi, mu, sigma, n):.6f}")

# 2. causal weight field and the minimum-count gate
rng = np.random.default_rng(1)
psi = rng.normal(0, 1, (15, 15))  # trainable grid, K = 7
w = build_weight_field(psi, pos=40, extents=(8, 8))
print(f"\nweight field at position 40: {w.size} causal weights, "
      f"sum = {w.sum():.6f}")
ydot = rng.normal(0, 2, 64)
print(f"gated at 29 causal positions: "
      f"{global_context_E3(ydot, psi, 29, (8, 8))}")
m, s = global_context_E3(ydot, psi, 30, (8, 8))
print(f"open at 30 causal positions:  ({m:.4f}, {s:.4f})")

# 3. range-code one channel of latents under its mixture table
values = np.round(rng.normal(0, 3, 500)).astype(int)
table = gmm_pmf_table(np.array([[1.0]]), np.array([[0.0]]),
                      np.array([[3.0]]))[0]
cdf = build_cdf(table)
enc = RangeEncoder()
for s in value_to_symbol(values):
    enc.encode_symbol(cdf, int(s))
payload = enc.flush()
ideal = -np.log2(table[value_to_symbol(values)]).sum()
print(f"\n500 latents: {len(payload)} bytes coded, "
      f"{ideal / 8:.1f} bytes ideal")
dec = RangeDecoder(payload)
decoded = [dec.decode_symbol(cdf) for _ in values]
print(f"decoded exactly: "
      f"{np.array_equal(decoded, value_to_symbol(values))}")
