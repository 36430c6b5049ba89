"""Domain types shared by every stage of the retrieval engine.

All types are immutable after construction (their numpy buffers are frozen),
so they can be shared freely across threads. Token/descriptor arithmetic is
float32 in memory; disk formats narrow tokens to float16.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import errors

UNIT_NORM_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class TokenGrid:
    """A per-image sequence of visual token embeddings with 2-D grid positions.

    tokens: (M, D) float32; positions: (M, 2) int32 (row, col) pairs, pairwise
    distinct and inside the grid_rows x grid_cols grid.
    """

    __slots__ = ("tokens", "positions", "grid_rows", "grid_cols")

    def __init__(self, tokens, positions, grid_rows: int, grid_cols: int):
        tokens = np.asarray(tokens, dtype=np.float32)
        positions = np.asarray(positions, dtype=np.int32)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise errors.DimensionMismatch(
                f"tokens must be a non-empty (M, D) array, got shape {tokens.shape}"
            )
        if positions.shape != (tokens.shape[0], 2):
            raise errors.DimensionMismatch(
                f"positions shape {positions.shape} does not match M={tokens.shape[0]}"
            )
        if grid_rows < 0 or grid_cols < 0:
            raise errors.OutOfRange("grid dimensions must be non-negative")
        rows, cols = positions[:, 0], positions[:, 1]
        if rows.min(initial=0) < 0 or cols.min(initial=0) < 0:
            raise errors.OutOfRange("positions must be non-negative")
        if len(positions) and (rows.max() >= grid_rows or cols.max() >= grid_cols):
            raise errors.OutOfRange(
                f"position outside {grid_rows}x{grid_cols} grid"
            )
        if len(np.unique(positions, axis=0)) != len(positions):
            raise errors.DuplicateId("positions must be pairwise distinct")
        self.tokens = _frozen(tokens)
        self.positions = _frozen(positions)
        self.grid_rows = int(grid_rows)
        self.grid_cols = int(grid_cols)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenGrid)
            and self.grid_rows == other.grid_rows
            and self.grid_cols == other.grid_cols
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.positions, other.positions)
        )

    def __repr__(self) -> str:
        return (
            f"TokenGrid(M={self.num_tokens}, D={self.dim}, "
            f"grid={self.grid_rows}x{self.grid_cols})"
        )


def dense_grid_positions(rows: int, cols: int) -> np.ndarray:
    """Row-major (row, col) pairs filling a rows x cols rectangle."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int32)


class GlobalDescriptor:
    """A unit-norm vector used for the exhaustive first search stage."""

    __slots__ = ("vector",)

    def __init__(self, vector):
        vector = np.asarray(vector, dtype=np.float32)
        if vector.ndim != 1 or vector.size < 1:
            raise errors.DimensionMismatch("descriptor must be a 1-D vector")
        norm = float(np.linalg.norm(vector.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise errors.OutOfRange(f"descriptor norm {norm} is not 1 within {UNIT_NORM_TOL}")
        self.vector = _frozen(vector)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    @staticmethod
    def normalized(vector) -> "GlobalDescriptor":
        """Normalize an arbitrary non-zero vector into a descriptor."""
        v = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise errors.OutOfRange("cannot normalize a zero vector")
        return GlobalDescriptor((v / norm).astype(np.float32))


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    global_desc: GlobalDescriptor
    grid: TokenGrid

    def __post_init__(self):
        if not self.image_id:
            raise errors.DuplicateId("image_id must be non-empty")


@dataclass(frozen=True)
class CorpusSummary:
    num_images: int
    dim_tokens: int
    dim_global: int
    min_tokens: int
    max_tokens: int


def validate_corpus(records) -> CorpusSummary:
    """Check corpus-wide invariants and summarize shapes.

    Raises EmptyCorpus, DuplicateId, or DimensionMismatch on the first
    violation; validation is pure, so repeated calls return equal summaries.
    """
    records = list(records)
    if not records:
        raise errors.EmptyCorpus("corpus has no records")
    seen: set[str] = set()
    dim_tokens = records[0].grid.dim
    dim_global = records[0].global_desc.dim
    min_m = max_m = records[0].grid.num_tokens
    for rec in records:
        if rec.image_id in seen:
            raise errors.DuplicateId(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        if rec.grid.dim != dim_tokens:
            raise errors.DimensionMismatch(
                f"{rec.image_id!r}: token dim {rec.grid.dim} != {dim_tokens}"
            )
        if rec.global_desc.dim != dim_global:
            raise errors.DimensionMismatch(
                f"{rec.image_id!r}: descriptor dim {rec.global_desc.dim} != {dim_global}"
            )
        m = rec.grid.num_tokens
        min_m = min(min_m, m)
        max_m = max(max_m, m)
    return CorpusSummary(len(records), dim_tokens, dim_global, min_m, max_m)


class Qrels:
    """Relevance judgments: query_id -> positive image_ids with optional group labels.

    A (query, image) pair may carry several group labels (e.g. one per
    grouping axis); labels are unioned across input lines.
    """

    def __init__(self, entries: dict[str, dict[str, frozenset[str]]]):
        if not entries:
            raise errors.EmptyCorpus("qrels are empty")
        for qid, positives in entries.items():
            if not positives:
                raise errors.NoPositives(f"query {qid!r} has no positives")
            for image_id, labels in positives.items():
                if any(not lbl for lbl in labels):
                    raise errors.OutOfRange(
                        f"empty group label for ({qid!r}, {image_id!r})"
                    )
        self._entries = {
            qid: {img: frozenset(lbls) for img, lbls in positives.items()}
            for qid, positives in entries.items()
        }

    @property
    def query_ids(self) -> list[str]:
        return sorted(self._entries)

    def positives(self, query_id: str) -> frozenset[str]:
        if query_id not in self._entries:
            raise errors.MissingQrels(f"no qrels for query {query_id!r}")
        return frozenset(self._entries[query_id])

    def labels(self, query_id: str, image_id: str) -> frozenset[str]:
        return self._entries.get(query_id, {}).get(image_id, frozenset())

    def group_labels(self) -> list[str]:
        out: set[str] = set()
        for positives in self._entries.values():
            for labels in positives.values():
                out.update(labels)
        return sorted(out)

    def queries_in_group(self, label: str) -> list[str]:
        """Queries with at least one positive carrying the given label."""
        return sorted(
            qid
            for qid, positives in self._entries.items()
            if any(label in labels for labels in positives.values())
        )

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @staticmethod
    def from_tsv(path) -> "Qrels":
        """Parse the qrels interchange format.

        One positive per line: ``query_id<TAB>image_id<TAB>1[<TAB>group]``.
        Lines starting with ``#`` are ignored.
        """
        entries: dict[str, dict[str, set[str]]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) not in (3, 4) or parts[2] != "1":
                    raise errors.IoFailure(f"{path}:{lineno}: malformed qrels line")
                qid, image_id = parts[0], parts[1]
                if not qid or not image_id:
                    raise errors.IoFailure(f"{path}:{lineno}: empty id")
                labels = entries.setdefault(qid, {}).setdefault(image_id, set())
                if len(parts) == 4:
                    if not parts[3]:
                        raise errors.IoFailure(f"{path}:{lineno}: empty group label")
                    labels.add(parts[3])
        return Qrels(
            {q: {i: frozenset(l) for i, l in pos.items()} for q, pos in entries.items()}
        )

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for qid in sorted(self._entries):
                for image_id in sorted(self._entries[qid]):
                    labels = sorted(self._entries[qid][image_id])
                    if labels:
                        for label in labels:
                            fh.write(f"{qid}\t{image_id}\t1\t{label}\n")
                    else:
                        fh.write(f"{qid}\t{image_id}\t1\n")


@dataclass(frozen=True)
class RankedItem:
    image_id: str
    s_g: float
    s_r: float | None = None
    s_fused: float | None = None

    def active_score(self) -> float:
        if self.s_fused is not None:
            return self.s_fused
        if self.s_r is not None:
            return self.s_r
        return self.s_g


def rank_order(items) -> list:
    """Sort by active score, descending; ties broken by ascending image_id."""
    return sorted(items, key=lambda it: (-it.active_score(), it.image_id))


@dataclass(frozen=True)
class RankedList:
    """The ordered output of either retrieval stage for one query."""

    query_id: str
    items: tuple[RankedItem, ...] = field(default_factory=tuple)

    def __post_init__(self):
        items = tuple(self.items)
        ids = [it.image_id for it in items]
        if len(set(ids)) != len(ids):
            raise errors.DuplicateId(f"duplicate image_id in ranking for {self.query_id!r}")
        if list(items) != rank_order(items):
            raise errors.OutOfRange(
                f"items for {self.query_id!r} are not in ranked order"
            )
        object.__setattr__(self, "items", items)

    def image_ids(self) -> list[str]:
        return [it.image_id for it in self.items]
