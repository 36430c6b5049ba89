"""Exact byte accounting per indexing strategy.

Builds the same 40-image corpus under several compression/selection settings
and prints where every byte goes. The payload column follows the storage laws
(fp16: 2*M*D, quantized: M*D/d); positions are two u16 per token.
"""

import tempfile
from pathlib import Path

import numpy as np

from tokenrank import IndexConfig, SelectionConfig, build_index, train_codebooks
from tokenrank.core import GlobalDescriptor, ImageRecord, TokenGrid, dense_grid_positions

rng = np.random.default_rng(1)
ROWS, COLS, D = 8, 8, 64
records = []
for i in range(40):
    tokens = rng.standard_normal((ROWS * COLS, D)).astype(np.float16).astype(np.float32)
    records.append(
        ImageRecord(
            f"img{i:03d}",
            GlobalDescriptor.normalized(rng.standard_normal(32)),
            TokenGrid(tokens, dense_grid_positions(ROWS, COLS), ROWS, COLS),
        )
    )
train = np.concatenate([r.grid.tokens for r in records])

settings = [
    ("fp16, all tokens", IndexConfig()),
    ("fp16, cluster 16", IndexConfig(selection=SelectionConfig("cluster", target_count=16, seed=0))),
    ("fp16, prune 16", IndexConfig(selection=SelectionConfig("prune", target_count=16))),
    ("fp16, sample 2x2", IndexConfig(selection=SelectionConfig("sample2x2"))),
    ("fp16, pool 2x2", IndexConfig(selection=SelectionConfig("pool2x2"))),
]
for d in (4, 16):
    cb = train_codebooks(train, d=d, k=256, seed=0)
    settings.append((f"pq d={d}, all tokens", IndexConfig(compression="pq", pq_d=d, codebooks=cb)))

print(f"{'setting':<22} {'payload/img':>12} {'positions':>10} {'global':>8} {'file total':>11}")
with tempfile.TemporaryDirectory() as tmp:
    for name, cfg in settings:
        report = build_index(records, cfg, Path(tmp) / "demo.tkix")
        mem = report.memory
        print(
            f"{name:<22} {mem.per_image.payload_bytes:>12} {mem.per_image.positions_bytes:>10} "
            f"{mem.per_image.global_bytes:>8} {mem.total_file_bytes:>11}"
        )
