"""Cached rho and residual across a denoising schedule, compared with the other backends.

Run: python3 notebooks/03_residual_caching.py
"""

import numpy as np

from rettention import (
    Backend,
    DenoisingSchedule,
    TrajectoryConfig,
    run_seeds,
    sliding_window_mask,
    sparsity,
)

cfg = TrajectoryConfig(steps=20, heads=2, tokens=64, head_dim=16, drift_alpha=0.99)
mask = sliding_window_mask(2, 64, 3)
sched = DenoisingSchedule(20, 5, 5, 0.04)
print(f"sparsity {sparsity(mask):.2f}%, schedule: {''.join(k.value[0].upper() for k in sched.kinds())}")
print("  W = warmup full, C = full step that refreshes the cache, S = sparse step\n")

backends = [Backend.SPARSE, Backend.POST_SOFTMAX, Backend.RETTENTION]
res = run_seeds(cfg, range(20), mask, sched, backends)
errs = {b: np.mean([r.rel_errors() for r in res[b]], axis=0) for b in backends}

print("step kind        sparse  post    rettention")
for t, kind in enumerate(sched.kinds()):
    row = "  ".join(f"{errs[b][t]:.4f}" for b in backends)
    print(f"{t:4d} {kind.value:11s}  {row}")

# Error grows with distance from the last refresh and drops back to zero at each C step.
steps = res[Backend.RETTENTION][0].sparse_steps()
print("\nmean over sparse steps: " + ", ".join(f"{b.value} {errs[b][steps].mean():.4f}" for b in backends))

# With a frozen trajectory and no ramp the cached terms are exact at every step.
frozen = TrajectoryConfig(steps=20, heads=2, tokens=64, head_dim=16, drift_alpha=1.0)
exact = run_seeds(frozen, [0], mask, DenoisingSchedule(20, 5, 5, 0.0), [Backend.RETTENTION])
print(f"frozen inputs, lambda=0: max rel err {exact[Backend.RETTENTION][0].rel_errors().max():.1e}")
