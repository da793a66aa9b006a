"""Sparse attention next to full attention on one random input.

Run: python3 notebooks/01_sparse_vs_full.py
"""

import numpy as np

from rettention import (
    AttentionInputs,
    compute_denominator_ratio,
    full_attention,
    post_softmax_masked,
    reshape_attention,
    sliding_window_mask,
    sparse_attention,
    sparsity,
)
from rettention.simulator import frobenius_rel_error

rng = np.random.default_rng(0)
h, T, d = 2, 64, 16
inp = AttentionInputs(*(rng.normal(size=(h, T, d)) for _ in range(3)))

# A narrow sliding window keeps only a handful of keys per query.
mask = sliding_window_mask(h, T, 2)
print(f"window w=2 on T={T}: sparsity {sparsity(mask):.2f}%")

full = full_attention(inp)
sparse = sparse_attention(inp, mask)
post = post_softmax_masked(inp, mask)

# Sparse softmax renormalises over the kept keys, so each row sums to 1 instead of
# the fraction of mass the full softmax put there. That fraction is rho.
rho = compute_denominator_ratio(inp, mask).rho
print(f"rho over all rows: min {rho.min():.3f}  mean {rho.mean():.3f}  max {rho.max():.3f}")
print(f"post-softmax row mass equals rho: {np.allclose(post.row_mass, rho)}")

# Scaling the sparse weights by rho recovers the post-softmax weights exactly.
reshaped = reshape_attention(inp, mask, rho)
print(f"rel err vs full  sparse {frobenius_rel_error(sparse.out, full.out):.4f}")
print(f"rel err vs full  post   {frobenius_rel_error(post.out, full.out):.4f}")
print(f"reshaped vs post max abs diff {np.abs(reshaped.out - post.out).max():.2e}")
