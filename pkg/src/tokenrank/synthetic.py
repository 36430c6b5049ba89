"""Seeded synthetic data: corpora with planted instance groups and toy images.

The planted corpus gives every instance group a distinctive set of token
directions (so the pairwise token scorer separates groups cleanly) while a
configurable subset of groups gets globally misleading descriptors whose
nearest neighbors are a decoy group. That makes stage 1 imperfect in a
controlled way and leaves measurable headroom for stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GlobalDescriptor, ImageRecord, Qrels, TokenGrid, dense_grid_positions
from .robustness import Image


@dataclass(frozen=True)
class PlantedCorpus:
    database: list[ImageRecord]
    queries: list[ImageRecord]
    qrels: Qrels
    misleading_groups: tuple[int, ...]


def _f16(a: np.ndarray) -> np.ndarray:
    # Keep token values exactly representable in float16 so that fp16 storage
    # round-trips bit-for-bit.
    return a.astype(np.float16).astype(np.float32)


def planted_corpus(
    num_groups: int = 20,
    group_size: int = 10,
    dim_tokens: int = 32,
    dim_global: int = 24,
    grid_side: int = 4,
    misleading: int = 5,
    seed: int = 0,
) -> PlantedCorpus:
    """Build a database of num_groups * group_size images plus one query per group."""
    if num_groups > dim_global or num_groups > dim_tokens:
        raise ValueError("need dim_global and dim_tokens >= num_groups for planted axes")
    rng = np.random.default_rng(seed)
    m = grid_side * grid_side
    positions = dense_grid_positions(grid_side, grid_side)

    # Group token signatures: a dominant per-group axis plus fixed per-slot variation.
    slot_noise = rng.standard_normal((num_groups, m, dim_tokens)) * 0.25
    signatures = np.zeros((num_groups, m, dim_tokens))
    for g in range(num_groups):
        signatures[g, :, g] = 1.0
    signatures += slot_noise
    signatures /= np.linalg.norm(signatures, axis=2, keepdims=True)

    good_groups = list(range(misleading, num_groups))

    def make_global(group: int, member: int, salt: np.ndarray) -> GlobalDescriptor:
        v = np.zeros(dim_global)
        if group < misleading:
            # Each member leans toward a different good group, so the group's
            # descriptors disagree with each other and stage 1 ranks a decoy
            # group above the true positives.
            partner = good_groups[(group + member) % len(good_groups)]
            v[group] = 0.55
            v[partner] = 0.8
        else:
            v[group] = 1.0
        v += 0.05 * salt
        return GlobalDescriptor.normalized(v)

    def make_grid(group: int) -> TokenGrid:
        tokens = signatures[group] + 0.03 * rng.standard_normal((m, dim_tokens))
        return TokenGrid(_f16(tokens), positions, grid_side, grid_side)

    database: list[ImageRecord] = []
    entries: dict[str, dict[str, frozenset[str]]] = {}
    for g in range(num_groups):
        label = "misled" if g < misleading else "clean"
        qid = f"q{g:02d}"
        entries[qid] = {}
        for i in range(group_size):
            image_id = f"g{g:02d}_{i:02d}"
            database.append(
                ImageRecord(
                    image_id, make_global(g, i, rng.standard_normal(dim_global)), make_grid(g)
                )
            )
            entries[qid][image_id] = frozenset({label})

    queries = [
        ImageRecord(
            f"q{g:02d}",
            make_global(g, group_size, rng.standard_normal(dim_global)),
            make_grid(g),
        )
        for g in range(num_groups)
    ]
    return PlantedCorpus(
        database=database,
        queries=queries,
        qrels=Qrels(entries),
        misleading_groups=tuple(range(misleading)),
    )


def toy_image(width: int = 96, height: int = 96, seed: int = 0) -> Image:
    """A structured test picture: seeded background pattern plus shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    style = int(rng.integers(0, 3))
    tint = rng.uniform(0.3, 1.0, size=3)
    if style == 0:
        base = np.stack(
            [
                xx * 255 / max(1, width - 1),
                yy * 255 / max(1, height - 1),
                (xx + yy) * 255 / max(1, width + height - 2),
            ],
            axis=2,
        )
    elif style == 1:
        period = int(rng.integers(6, 18))
        stripes = ((xx // period + yy // period) % 2) * 255.0
        base = np.stack([stripes, 255.0 - stripes, stripes], axis=2)
    else:
        fx, fy = rng.uniform(0.05, 0.3, size=2)
        waves = (np.sin(fx * xx) * np.cos(fy * yy) + 1.0) * 127.5
        base = np.stack([waves, waves[::-1, :], waves[:, ::-1]], axis=2)
    px = base * tint
    for _ in range(6):
        cy, cx = rng.integers(0, height), rng.integers(0, width)
        r = int(rng.integers(max(2, min(height, width) // 12), max(3, min(height, width) // 5)))
        color = rng.integers(0, 256, size=3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        px[mask] = color
    return Image(np.rint(np.clip(px, 0, 255)).astype(np.uint8))
