"""Mask statistics and the analytic FLOP model.

Run: python3 notebooks/04_flops_and_masks.py
"""

from rettention import (
    VideoLayout,
    block_diagonal_mask,
    flop_count,
    framewise_window_mask,
    sliding_window_mask,
    sparsity,
    window_for_sparsity,
)

print("T      w  sparsity   flop ratio  rettention overhead")
for T in (64, 128, 256, 512, 1024):
    w = window_for_sparsity(T, 96.9)
    mask = sliding_window_mask(1, T, w)
    full, sparse = flop_count(mask, 64)
    _, rett = flop_count(mask, 64, rettention=True)
    print(f"{T:5d} {w:3d}  {sparsity(mask):7.3f}%  {sparse.total / full.total:.5f}     {100 * rett.overhead / full.total:.3f}%")

# Video-shaped masks: each spatial token sees its neighbourhood in every frame.
layout = VideoLayout(frames=4, spatial_tokens=32)
for w in (0, 1, 3):
    m = framewise_window_mask(1, layout, w)
    print(f"framewise F=4 S=32 w={w}: {m.included_count} entries, sparsity {sparsity(m):.2f}%")

m = block_diagonal_mask(1, 128, 8)
print(f"block diagonal, block 8 on T=128: sparsity {sparsity(m):.2f}%")
