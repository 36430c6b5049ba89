"""Token-count reduction: pruning, clustering, sampling, pooling on one grid.

Each strategy shrinks the 8x8 grid of 64 tokens before indexing. Pruning and
sampling keep original vectors; clustering stores centroids with medoid
positions; pooling averages 2x2 windows.
"""

import numpy as np

from tokenrank import (
    SelectionConfig,
    pool_average_2x2,
    prune_divprune,
    sample_uniform_2x2,
    select_kmeans,
)
from tokenrank.core import TokenGrid, dense_grid_positions
from tokenrank.tokensel import apply_selection

rng = np.random.default_rng(7)
rows = cols = 8
grid = TokenGrid(
    rng.standard_normal((rows * cols, 16)).astype(np.float32),
    dense_grid_positions(rows, cols),
    rows,
    cols,
)
print(f"input grid: {grid.num_tokens} tokens ({rows}x{cols}), D={grid.dim}")

pruned = prune_divprune(grid, 20)
kept = {tuple(p) for p in pruned.positions.tolist()}
print(f"prune ->{pruned.num_tokens:>4} tokens, all original rows, e.g. positions {sorted(kept)[:4]} ...")

clustered = select_kmeans(grid, 20, seed=0)
original_rows = {tuple(np.round(t, 4)) for t in grid.tokens.tolist()}
novel = sum(tuple(np.round(t, 4)) not in original_rows for t in clustered.tokens.tolist())
print(f"cluster ->{clustered.num_tokens:>3} centroids ({novel} are new vectors), positions from medoids")

sampled = sample_uniform_2x2(grid)
print(f"sample2x2 ->{sampled.num_tokens:>2} tokens, every window's top-left, originals untouched")

pooled = pool_average_2x2(grid)
print(f"pool2x2 ->{pooled.num_tokens:>4} tokens, window means at top-left positions")

# The same strategies drive index builds through SelectionConfig.
for cfg in (SelectionConfig("prune", target_count=20),
            SelectionConfig("cluster", target_count=20, seed=0),
            SelectionConfig("sample2x2"),
            SelectionConfig("pool2x2")):
    out = apply_selection(grid, cfg)
    print(f"  config {cfg.to_text():<14} -> {out.num_tokens} tokens")
