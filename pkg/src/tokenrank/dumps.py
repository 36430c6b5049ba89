"""Per-image token-dump files, the interchange between extractors and the indexer.

One image is one ``.tkdp`` file (tokens + grid metadata, little-endian) plus a
``.glob`` sidecar holding the global descriptor. The image id is the filename
stem.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import errors
from .core import GlobalDescriptor, ImageRecord, TokenGrid

DUMP_MAGIC = b"TKDP"
DUMP_VERSION = 1
DUMP_SUFFIX = ".tkdp"
GLOBAL_SUFFIX = ".glob"


def write_token_dump(path, grid: TokenGrid) -> None:
    if grid.grid_rows > 0xFFFF or grid.grid_cols > 0xFFFF:
        raise errors.OutOfRange("grid dimensions exceed u16 range")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(
            struct.pack(
                "<HIIHH",
                DUMP_VERSION,
                grid.num_tokens,
                grid.dim,
                grid.grid_rows,
                grid.grid_cols,
            )
        )
        fh.write(grid.positions.astype("<u2").tobytes())
        fh.write(grid.tokens.astype("<f2").tobytes())


def read_token_dump(path) -> TokenGrid:
    header_fmt = "<HIIHH"
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DUMP_MAGIC:
            raise errors.BadMagic(f"{path}: not a token dump")
        header = fh.read(struct.calcsize(header_fmt))
        if len(header) != struct.calcsize(header_fmt):
            raise errors.Corrupt(f"{path}: truncated header")
        version, m, dim, rows, cols = struct.unpack(header_fmt, header)
        if version != DUMP_VERSION:
            raise errors.UnsupportedVersion(f"{path}: version {version}")
        pos_bytes = fh.read(m * 4)
        tok_bytes = fh.read(m * dim * 2)
        if len(pos_bytes) != m * 4 or len(tok_bytes) != m * dim * 2:
            raise errors.Corrupt(f"{path}: truncated payload")
    positions = np.frombuffer(pos_bytes, dtype="<u2").reshape(m, 2).astype(np.int32)
    tokens = np.frombuffer(tok_bytes, dtype="<f2").reshape(m, dim).astype(np.float32)
    return TokenGrid(tokens, positions, rows, cols)


def write_global_sidecar(path, desc: GlobalDescriptor) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", desc.dim))
        fh.write(desc.vector.astype("<f4").tobytes())


def read_global_sidecar(path) -> GlobalDescriptor:
    with open(path, "rb") as fh:
        header = fh.read(4)
        if len(header) != 4:
            raise errors.Corrupt(f"{path}: truncated sidecar")
        (dim,) = struct.unpack("<I", header)
        payload = fh.read(dim * 4)
        if len(payload) != dim * 4:
            raise errors.Corrupt(f"{path}: truncated sidecar payload")
    return GlobalDescriptor(np.frombuffer(payload, dtype="<f4").copy())


def write_record(directory, record: ImageRecord) -> None:
    directory = Path(directory)
    write_token_dump(directory / f"{record.image_id}{DUMP_SUFFIX}", record.grid)
    write_global_sidecar(directory / f"{record.image_id}{GLOBAL_SUFFIX}", record.global_desc)


def list_dump_ids(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise errors.IoFailure(f"{directory}: not a directory")
    return sorted(p.stem for p in directory.glob(f"*{DUMP_SUFFIX}"))


def load_record(directory, image_id: str, need_global: bool = True) -> ImageRecord:
    directory = Path(directory)
    grid = read_token_dump(directory / f"{image_id}{DUMP_SUFFIX}")
    glob_path = directory / f"{image_id}{GLOBAL_SUFFIX}"
    if need_global and not glob_path.exists():
        raise errors.IoFailure(f"{glob_path}: missing global-descriptor sidecar")
    if glob_path.exists():
        desc = read_global_sidecar(glob_path)
    else:
        # Placeholder unit vector; callers that only need the grid use this.
        v = np.zeros(1, dtype=np.float32)
        v[0] = 1.0
        desc = GlobalDescriptor(v)
    return ImageRecord(image_id, desc, grid)


def load_corpus(directory) -> list[ImageRecord]:
    """Read every dump + sidecar pair in a directory, sorted by image id."""
    ids = list_dump_ids(directory)
    if not ids:
        raise errors.EmptyCorpus(f"{directory}: no {DUMP_SUFFIX} files")
    return [load_record(directory, image_id) for image_id in ids]
