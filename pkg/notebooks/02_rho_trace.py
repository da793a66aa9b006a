"""How the full denominator, the sparse denominator and their ratio move over steps.

Run: python3 notebooks/02_rho_trace.py
"""

import numpy as np

from rettention import TrajectoryConfig, generate_trajectory, sliding_window_mask, sparsity, trace_rho
from rettention.simulator import coefficient_of_variation

mask = sliding_window_mask(2, 64, 3)
print(f"tracking head 0, row 32 under a {sparsity(mask):.2f}% window mask")

for alpha in (0.9, 0.995):
    cv_full, cv_sparse, cv_rho = [], [], []
    for seed in range(20):
        cfg = TrajectoryConfig(seed=seed, steps=20, heads=2, tokens=64, head_dim=16, drift_alpha=alpha)
        tr = trace_rho(generate_trajectory(cfg), mask, 0, 32)
        cv_full.append(coefficient_of_variation(tr.full_denom))
        cv_sparse.append(coefficient_of_variation(tr.sparse_denom))
        cv_rho.append(coefficient_of_variation(tr.rho))
    print(
        f"alpha={alpha}: mean CV  full {np.mean(cv_full):.4f}  sparse {np.mean(cv_sparse):.4f}  rho {np.mean(cv_rho):.4f}"
    )

# With i.i.d. Gaussian drift the full denominator averages T terms while rho is driven
# by the few kept ones, so rho fluctuates more here than the full sum does.
cfg = TrajectoryConfig(seed=0, steps=8, heads=2, tokens=64, head_dim=16, drift_alpha=0.995)
tr = trace_rho(generate_trajectory(cfg), mask, 0, 32)
print("\nstep  full_denom  sparse_denom  rho")
for t in range(len(tr.rho)):
    print(f"{t:4d}  {tr.full_denom[t]:10.3f}  {tr.sparse_denom[t]:12.3f}  {tr.rho[t]:.4f}")
