"""Token-count reduction strategies applied to database images before indexing.

Four strategies: diverse pruning (greedy max-min over Euclidean distances),
k-means selection (stored vectors are centroids, positions come from the
medoids), uniform 2x2 sampling (keep each window's top-left token), and 2x2
average pooling. All are deterministic given (grid, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .core import TokenGrid
from .kmeans import kmeans

STRATEGIES = ("none", "prune", "cluster", "sample2x2", "pool2x2")


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str = "none"
    target_count: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise errors.OutOfRange(f"unknown selection strategy {self.strategy!r}")
        needs_count = self.strategy in ("prune", "cluster")
        if needs_count and (self.target_count is None or self.target_count < 1):
            raise errors.OutOfRange(f"{self.strategy} requires a positive target_count")
        if not needs_count and self.target_count is not None:
            raise errors.OutOfRange(f"{self.strategy} does not take target_count")
        if self.strategy == "cluster":
            if self.seed is None:
                object.__setattr__(self, "seed", 0)
        elif self.seed is not None:
            raise errors.OutOfRange(f"{self.strategy} does not take a seed")

    def to_text(self) -> str:
        if self.strategy == "prune":
            return f"prune:{self.target_count}"
        if self.strategy == "cluster":
            return f"cluster:{self.target_count}:{self.seed}"
        return self.strategy

    @staticmethod
    def from_text(text: str) -> "SelectionConfig":
        parts = text.split(":")
        name = parts[0]
        try:
            if name == "prune" and len(parts) == 2:
                return SelectionConfig("prune", target_count=int(parts[1]))
            if name == "cluster" and len(parts) in (2, 3):
                seed = int(parts[2]) if len(parts) == 3 else 0
                return SelectionConfig("cluster", target_count=int(parts[1]), seed=seed)
            if name in ("none", "sample2x2", "pool2x2") and len(parts) == 1:
                return SelectionConfig(name)
        except ValueError:
            pass
        raise errors.OutOfRange(f"cannot parse selection spec {text!r}")


def prune_divprune(grid: TokenGrid, m: int) -> TokenGrid:
    """Greedy max-min diverse subset of m tokens, kept in original order.

    The first pick is the token farthest from its nearest neighbor in the
    full set; each later pick maximizes its minimum distance to the already
    selected tokens. Ties break toward the smaller original index.
    """
    total = grid.num_tokens
    if not 1 <= m <= total:
        raise errors.TargetTooLarge(f"m={m} outside [1, M={total}]")
    if m == total:
        return grid
    x = grid.tokens.astype(np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)

    first = int(np.argmax(d2.min(axis=1)))
    selected = [first]
    min_d = d2[:, first].copy()
    min_d[first] = -np.inf
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d))
        selected.append(nxt)
        min_d = np.minimum(min_d, d2[:, nxt])
        min_d[nxt] = -np.inf

    keep = np.sort(np.asarray(selected))
    return TokenGrid(grid.tokens[keep], grid.positions[keep], grid.grid_rows, grid.grid_cols)


def select_kmeans(grid: TokenGrid, k: int, seed: int = 0) -> TokenGrid:
    """Cluster tokens into k groups; store centroids with medoid positions.

    The medoid of a cluster is its member nearest to the centroid (ties to
    the smaller original index); outputs are ordered by medoid original index.
    """
    total = grid.num_tokens
    if not 1 <= k <= total:
        raise errors.TargetTooLarge(f"K={k} outside [1, M={total}]")
    centroids, assign = kmeans(grid.tokens, k, seed=seed)
    tokens64 = grid.tokens.astype(np.float64)
    medoids = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(assign == c)
        diff = tokens64[members] - centroids[c].astype(np.float64)
        medoids[c] = members[int(np.argmin(np.einsum("ij,ij->i", diff, diff)))]
    order = np.argsort(medoids, kind="stable")
    return TokenGrid(
        centroids[order],
        grid.positions[medoids[order]],
        grid.grid_rows,
        grid.grid_cols,
    )


def _require_dense(grid: TokenGrid) -> np.ndarray:
    """Return a (rows, cols) -> token index lookup for a dense rectangular grid."""
    rows, cols = grid.grid_rows, grid.grid_cols
    if grid.num_tokens != rows * cols:
        raise errors.NonRectangularGrid(
            f"{grid.num_tokens} tokens do not fill a {rows}x{cols} rectangle"
        )
    lookup = np.full((rows, cols), -1, dtype=np.int64)
    lookup[grid.positions[:, 0], grid.positions[:, 1]] = np.arange(grid.num_tokens)
    if (lookup < 0).any():
        raise errors.NonRectangularGrid("grid positions do not cover the rectangle")
    return lookup


def sample_uniform_2x2(grid: TokenGrid) -> TokenGrid:
    """Keep the top-left token of each non-overlapping 2x2 window.

    Trailing odd rows/columns form degenerate windows that still contribute
    their top-left token. Vectors and positions pass through unmodified.
    """
    lookup = _require_dense(grid)
    keep = lookup[::2, ::2].ravel()
    return TokenGrid(grid.tokens[keep], grid.positions[keep], grid.grid_rows, grid.grid_cols)


def pool_average_2x2(grid: TokenGrid) -> TokenGrid:
    """Average each non-overlapping 2x2 window into one token.

    Degenerate edge windows average their 1-2 members. The pooled token keeps
    the window's top-left position in the original coordinate system, so the
    spatial channel stays directly comparable with unpooled grids; the output
    therefore keeps the original grid shape while holding
    ceil(rows/2) * ceil(cols/2) tokens.
    """
    lookup = _require_dense(grid)
    rows, cols = grid.grid_rows, grid.grid_cols
    out_tokens = []
    out_positions = []
    for r0 in range(0, rows, 2):
        for c0 in range(0, cols, 2):
            idx = lookup[r0 : r0 + 2, c0 : c0 + 2].ravel()
            out_tokens.append(grid.tokens[idx].mean(axis=0, dtype=np.float64))
            out_positions.append((r0, c0))
    return TokenGrid(
        np.asarray(out_tokens, dtype=np.float32),
        np.asarray(out_positions, dtype=np.int32),
        rows,
        cols,
    )


def apply_selection(grid: TokenGrid, cfg: SelectionConfig) -> TokenGrid:
    if cfg.strategy == "none":
        return grid
    if cfg.strategy == "prune":
        return prune_divprune(grid, cfg.target_count)
    if cfg.strategy == "cluster":
        return select_kmeans(grid, cfg.target_count, seed=cfg.seed)
    if cfg.strategy == "sample2x2":
        return sample_uniform_2x2(grid)
    return pool_average_2x2(grid)
