"""Stage 1: exhaustive cosine search over global descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .core import GlobalDescriptor

DEFAULT_TOPK = 1000
# Shortlist sizes exercised by the benchmark subcommand.
TOPK_SWEEP = (10, 50, 100, 200, 400, 1000, 5000)


@dataclass(frozen=True)
class Shortlist:
    """Stage-1 candidates for one query, best first."""

    query_id: str
    candidates: tuple[tuple[str, float], ...]

    def image_ids(self) -> list[str]:
        return [image_id for image_id, _ in self.candidates]


def global_topk(query: GlobalDescriptor, index, k: int = DEFAULT_TOPK,
                query_id: str = "query") -> Shortlist:
    """Exact top-k by cosine similarity (a full scan, no approximation).

    Scores are clipped into [-1, 1] to absorb float rounding on unit vectors;
    ties break by ascending image id.
    """
    if k < 1:
        raise errors.OutOfRange(f"k={k} must be >= 1")
    ids = index.image_ids
    if not ids:
        raise errors.EmptyIndex("index holds no images")
    matrix = index.global_matrix.astype(np.float64)
    scores = matrix @ query.vector.astype(np.float64)
    np.clip(scores, -1.0, 1.0, out=scores)
    order = np.lexsort((np.asarray(ids), -scores))[: min(k, len(ids))]
    return Shortlist(
        query_id=query_id,
        candidates=tuple((ids[i], float(scores[i])) for i in order),
    )
