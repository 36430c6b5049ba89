"""The on-disk compressed database: globals for stage 1, token payloads for stage 2.

Single little-endian file, append-ordered sections with a trailing table of
contents::

    magic "TKIX", u16 version=1, u32 flags,
    u32 config_len + canonical config text, u64 image_count
    section 1: u32 d_g, then per image (u16 id_len + id, d_g x f32)
    section 2: per image (u16 id_len + id, u16 grid_rows, u16 grid_cols,
               u32 m, u32 d, u8 payload_kind, payload, m x (u16,u16) positions)
    section 3: per image (u16 id_len + id, u64 block offset)

Each section is followed by a u32 CRC32; the first CRC covers everything from
the start of the file, so every byte before the final checksum is protected.
Payload kind 0 stores float16 tokens (2*M*D bytes), kind 1 stores one-byte
subspace codes (M*D/d bytes).
"""

from __future__ import annotations

import io
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors, pq
from .core import GlobalDescriptor, TokenGrid
from .fsutil import atomic_write
from .tokensel import SelectionConfig, apply_selection

INDEX_MAGIC = b"TKIX"
INDEX_VERSION = 1
PAYLOAD_FP16 = 0
PAYLOAD_PQ = 1

_BLOCK_HEADER = "<HHIIB"  # grid_rows, grid_cols, m, d, payload_kind


@dataclass(frozen=True)
class IndexConfig:
    """What gets applied to every record at build time."""

    compression: str = "fp16"  # "fp16" or "pq"
    pq_d: int | None = None
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    codebooks: pq.PqCodebooks | None = None
    codebooks_path: str | None = None

    def __post_init__(self):
        if self.compression not in ("fp16", "pq"):
            raise errors.OutOfRange(f"unknown compression {self.compression!r}")
        if (self.compression == "pq") != (self.pq_d is not None):
            raise errors.OutOfRange("pq_d must be given exactly when compression is pq")
        if self.compression == "fp16" and self.codebooks is not None:
            raise errors.OutOfRange("codebooks only apply to pq compression")
        if self.codebooks is not None and self.codebooks.d != self.pq_d:
            raise errors.DimensionMismatch(
                f"codebooks d={self.codebooks.d} does not match pq_d={self.pq_d}"
            )

    def to_text(self) -> str:
        comp = "fp16" if self.compression == "fp16" else f"pq:{self.pq_d}"
        parts = [f"compression={comp}", f"selection={self.selection.to_text()}"]
        if self.codebooks_path:
            parts.append(f"codebooks={self.codebooks_path}")
        return ";".join(parts)

    @staticmethod
    def from_text(text: str) -> "IndexConfig":
        fields: dict[str, str] = {}
        for part in text.split(";"):
            if "=" not in part:
                raise errors.Corrupt(f"bad config fragment {part!r}")
            key, value = part.split("=", 1)
            if key in fields:
                raise errors.Corrupt(f"repeated config key {key!r}")
            fields[key] = value
        comp = fields.pop("compression", None)
        sel = fields.pop("selection", "none")
        cb_path = fields.pop("codebooks", None)
        if fields:
            raise errors.Corrupt(f"unknown config keys {sorted(fields)}")
        if comp == "fp16":
            compression, pq_d = "fp16", None
        elif comp and comp.startswith("pq:"):
            try:
                compression, pq_d = "pq", int(comp[3:])
            except ValueError:
                raise errors.Corrupt(f"bad pq spec {comp!r}") from None
        else:
            raise errors.Corrupt(f"bad compression spec {comp!r}")
        return IndexConfig(
            compression=compression,
            pq_d=pq_d,
            selection=SelectionConfig.from_text(sel),
            codebooks_path=cb_path,
        )


@dataclass(frozen=True)
class _Entry:
    image_id: str
    grid_rows: int
    grid_cols: int
    m: int
    d: int
    payload_kind: int
    offset: int  # absolute file offset of the block


@dataclass(frozen=True)
class MemoryTotals:
    global_bytes: int = 0
    payload_bytes: int = 0
    positions_bytes: int = 0
    metadata_bytes: int = 0

    @property
    def image_total(self) -> int:
        return self.global_bytes + self.payload_bytes + self.positions_bytes + self.metadata_bytes


@dataclass(frozen=True)
class MemoryReport:
    num_images: int
    totals: MemoryTotals
    per_image: MemoryTotals  # exact when shapes are identical, else rounded mean
    file_overhead_bytes: int
    total_file_bytes: int


@dataclass(frozen=True)
class BuildReport:
    num_images: int
    total_bytes: int
    payload_bytes_per_image: float
    overhead_bytes_per_image: float
    memory: MemoryReport


def _payload_nbytes(kind: int, m: int, d: int, pq_d: int | None) -> int:
    if kind == PAYLOAD_FP16:
        return 2 * m * d
    return m * (d // pq_d)


def _entry_metadata_bytes(image_id: str) -> int:
    id_bytes = len(image_id.encode("utf-8"))
    # id appears in all three sections; block header is 13 bytes, TOC offset 8.
    return 3 * (2 + id_bytes) + struct.calcsize(_BLOCK_HEADER) + 8


def _accounting(
    entries, dim_global: int, config_text: str
) -> tuple[MemoryTotals, int]:
    totals = MemoryTotals(
        global_bytes=sum(4 * dim_global for _ in entries),
        payload_bytes=sum(e.payload_nbytes for e in entries),
        positions_bytes=sum(4 * e.m for e in entries),
        metadata_bytes=sum(_entry_metadata_bytes(e.image_id) for e in entries),
    )
    # magic + version + flags + config length + config + count + d_g + 3 CRCs
    overhead = 4 + 2 + 4 + 4 + len(config_text.encode("utf-8")) + 8 + 4 + 12
    return totals, overhead


@dataclass(frozen=True)
class _Accountable:
    image_id: str
    m: int
    payload_nbytes: int


class _CrcWriter:
    def __init__(self, fh):
        self._fh = fh
        self.crc = 0
        self.offset = 0

    def write(self, data: bytes) -> None:
        self._fh.write(data)
        self.crc = zlib.crc32(data, self.crc)
        self.offset += len(data)

    def emit_crc(self) -> None:
        # The CRC field itself starts the next protected range.
        value = self.crc
        self._fh.write(struct.pack("<I", value))
        self.offset += 4
        self.crc = 0


def _write_id(w: _CrcWriter, image_id: str) -> None:
    encoded = image_id.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise errors.OutOfRange(f"image id too long: {image_id!r}")
    w.write(struct.pack("<H", len(encoded)))
    w.write(encoded)


def _compress_record(record, cfg: IndexConfig):
    grid = apply_selection(record.grid, cfg.selection)
    if grid.grid_rows > 0xFFFF or grid.grid_cols > 0xFFFF:
        raise errors.OutOfRange("grid dimensions exceed u16 range")
    if cfg.compression == "fp16":
        payload = grid.tokens.astype("<f2").tobytes()
        kind = PAYLOAD_FP16
    else:
        payload = pq.encode(grid, cfg.codebooks).codes.astype("<u1").tobytes()
        kind = PAYLOAD_PQ
    positions = grid.positions.astype("<u2").tobytes()
    return record.image_id, grid, kind, payload, positions


def build_index(records, cfg: IndexConfig, out_path, jobs: int = 1) -> BuildReport:
    """Apply selection + compression to every record and write the index file.

    Compression parallelizes per image; writing is single-threaded and atomic
    (a failed build leaves no file behind).
    """
    records = list(records)
    if cfg.compression == "pq" and cfg.codebooks is None:
        raise errors.OutOfRange("pq compression requires trained codebooks")
    config_text = cfg.to_text()

    if jobs > 1 and records:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            compressed = list(pool.map(lambda r: _compress_record(r, cfg), records))
    else:
        compressed = [_compress_record(r, cfg) for r in records]

    dim_global = records[0].global_desc.dim if records else 0
    accountables = []
    try:
        with atomic_write(out_path) as tmp:
            with open(tmp, "wb") as fh:
                w = _CrcWriter(fh)
                w.write(INDEX_MAGIC)
                w.write(struct.pack("<H", INDEX_VERSION))
                w.write(struct.pack("<I", 0))  # flags
                encoded_cfg = config_text.encode("utf-8")
                w.write(struct.pack("<I", len(encoded_cfg)))
                w.write(encoded_cfg)
                w.write(struct.pack("<Q", len(records)))

                # section 1: global descriptors
                w.write(struct.pack("<I", dim_global))
                for record in records:
                    _write_id(w, record.image_id)
                    w.write(record.global_desc.vector.astype("<f4").tobytes())
                w.emit_crc()

                # section 2: token blocks
                offsets: list[int] = []
                for image_id, grid, kind, payload, positions in compressed:
                    offsets.append(w.offset)
                    _write_id(w, image_id)
                    w.write(
                        struct.pack(
                            _BLOCK_HEADER,
                            grid.grid_rows,
                            grid.grid_cols,
                            grid.num_tokens,
                            grid.dim,
                            kind,
                        )
                    )
                    w.write(payload)
                    w.write(positions)
                    accountables.append(
                        _Accountable(image_id, grid.num_tokens, len(payload))
                    )
                w.emit_crc()

                # section 3: table of contents
                for (image_id, *_), offset in zip(compressed, offsets):
                    _write_id(w, image_id)
                    w.write(struct.pack("<Q", offset))
                w.emit_crc()
    except OSError as exc:
        raise errors.IoFailure(f"cannot write index {out_path}: {exc}") from exc

    totals, overhead = _accounting(accountables, dim_global, config_text)
    n = len(records)
    total_file = totals.image_total + overhead
    per_image = MemoryTotals(
        *(round(getattr(totals, f) / n) if n else 0
          for f in ("global_bytes", "payload_bytes", "positions_bytes", "metadata_bytes"))
    )
    memory = MemoryReport(n, totals, per_image, overhead, total_file)
    return BuildReport(
        num_images=n,
        total_bytes=total_file,
        payload_bytes_per_image=totals.payload_bytes / n if n else 0.0,
        overhead_bytes_per_image=(
            (totals.image_total - totals.payload_bytes) / n if n else 0.0
        ),
        memory=memory,
    )


class _CrcReader:
    """Sequential reader that folds everything read into a running CRC."""

    def __init__(self, fh):
        self._fh = fh
        self.crc = 0
        self.offset = 0

    def read(self, n: int) -> bytes:
        data = self._fh.read(n)
        if len(data) != n:
            raise errors.Corrupt("unexpected end of file")
        self.crc = zlib.crc32(data, self.crc)
        self.offset += n
        return data

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def check_crc(self) -> None:
        expected = self.crc
        raw = self._fh.read(4)
        if len(raw) != 4:
            raise errors.Corrupt("missing section checksum")
        (stored,) = struct.unpack("<I", raw)
        self.offset += 4
        if stored != expected:
            raise errors.Corrupt("section checksum mismatch")
        self.crc = 0

    def read_id(self) -> str:
        (length,) = self.unpack("<H")
        try:
            return self.read(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise errors.Corrupt("undecodable image id") from exc


class Index:
    """Open handle over an index file: globals in memory, payloads on demand.

    Safe for concurrent readers; fetches reopen the file per call.
    """

    def __init__(self, path, config, dim_global, ids, globals_matrix, entries, codebooks):
        self.path = Path(path)
        self.config = config
        self.dim_global = dim_global
        self._ids = ids
        self._globals = globals_matrix
        self._entries = entries
        self._codebooks = codebooks

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def image_ids(self) -> list[str]:
        return list(self._ids)

    @property
    def global_matrix(self) -> np.ndarray:
        return self._globals

    def descriptor(self, image_id: str) -> GlobalDescriptor:
        entry = self._entries.get(image_id)
        if entry is None:
            raise errors.UnknownId(f"unknown image id {image_id!r}")
        return GlobalDescriptor(self._globals[self._ids.index(image_id)])

    def fetch_tokens(self, image_id: str) -> TokenGrid:
        """Read one image's block and return its full-precision token grid."""
        entry = self._entries.get(image_id)
        if entry is None:
            raise errors.UnknownId(f"unknown image id {image_id!r}")
        with open(self.path, "rb") as fh:
            fh.seek(entry.offset)
            id_len = struct.unpack("<H", fh.read(2))[0]
            fh.read(id_len)
            rows, cols, m, d, kind = struct.unpack(
                _BLOCK_HEADER, fh.read(struct.calcsize(_BLOCK_HEADER))
            )
            payload = fh.read(_payload_nbytes(kind, m, d, self.config.pq_d))
            positions = np.frombuffer(fh.read(4 * m), dtype="<u2").reshape(m, 2)
        if kind == PAYLOAD_FP16:
            tokens = np.frombuffer(payload, dtype="<f2").reshape(m, d).astype(np.float32)
        else:
            if self._codebooks is None:
                raise errors.IoFailure(
                    f"index {self.path} is pq-compressed but no codebooks are available"
                )
            codes = pq.PqCodes(np.frombuffer(payload, dtype=np.uint8).reshape(m, -1).copy())
            tokens = pq.reconstruct(codes, self._codebooks)
        return TokenGrid(tokens, positions.astype(np.int32), rows, cols)

    def memory_report(self) -> MemoryReport:
        accountables = [
            _Accountable(
                e.image_id,
                e.m,
                _payload_nbytes(e.payload_kind, e.m, e.d, self.config.pq_d),
            )
            for e in self._entries.values()
        ]
        totals, overhead = _accounting(accountables, self.dim_global, self.config.to_text())
        n = len(accountables)
        per_image = MemoryTotals(
            *(round(getattr(totals, f) / n) if n else 0
              for f in ("global_bytes", "payload_bytes", "positions_bytes", "metadata_bytes"))
        )
        return MemoryReport(n, totals, per_image, overhead, totals.image_total + overhead)


def open_index(path, codebooks: pq.PqCodebooks | None = None) -> Index:
    """Verify all checksums, load the header and globals, and return a handle.

    Any structural damage surfaces here as BadMagic / UnsupportedVersion /
    Corrupt; nothing is served from a file that fails verification.
    """
    path = Path(path)
    if not path.exists():
        raise errors.IoFailure(f"{path}: no such file")
    try:
        with open(path, "rb") as fh:
            r = _CrcReader(fh)
            magic = r.read(4)
            if magic != INDEX_MAGIC:
                raise errors.BadMagic(f"{path}: bad magic {magic!r}")
            (version,) = r.unpack("<H")
            if version != INDEX_VERSION:
                raise errors.UnsupportedVersion(f"{path}: version {version}")
            r.unpack("<I")  # flags
            (cfg_len,) = r.unpack("<I")
            try:
                config_text = r.read(cfg_len).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise errors.Corrupt(f"{path}: undecodable config") from exc
            config = IndexConfig.from_text(config_text)
            (count,) = r.unpack("<Q")

            # section 1
            (dim_global,) = r.unpack("<I")
            ids: list[str] = []
            vectors = np.empty((count, dim_global), dtype=np.float32)
            for i in range(count):
                ids.append(r.read_id())
                vectors[i] = np.frombuffer(r.read(4 * dim_global), dtype="<f4")
            r.check_crc()

            # section 2: walk blocks to feed the checksum and learn offsets
            walked: dict[str, _Entry] = {}
            order: list[str] = []
            for _ in range(count):
                offset = r.offset
                image_id = r.read_id()
                rows, cols, m, d, kind = r.unpack(_BLOCK_HEADER)
                if kind not in (PAYLOAD_FP16, PAYLOAD_PQ):
                    raise errors.Corrupt(f"{path}: unknown payload kind {kind}")
                if kind == PAYLOAD_PQ:
                    if config.pq_d is None or config.pq_d <= 0 or d % config.pq_d:
                        raise errors.Corrupt(f"{path}: block dims disagree with config")
                r.read(_payload_nbytes(kind, m, d, config.pq_d))
                r.read(4 * m)
                if image_id in walked:
                    raise errors.Corrupt(f"{path}: duplicate block for {image_id!r}")
                walked[image_id] = _Entry(image_id, rows, cols, m, d, kind, offset)
                order.append(image_id)
            r.check_crc()

            # section 3: TOC must agree with the walk
            for _ in range(count):
                image_id = r.read_id()
                (offset,) = r.unpack("<Q")
                entry = walked.get(image_id)
                if entry is None or entry.offset != offset:
                    raise errors.Corrupt(f"{path}: TOC disagrees with blocks")
            r.check_crc()

            if order != ids:
                raise errors.Corrupt(f"{path}: section ids disagree")
            if fh.read(1):
                raise errors.Corrupt(f"{path}: trailing bytes")
    except struct.error as exc:
        raise errors.Corrupt(f"{path}: malformed structure") from exc

    if config.compression == "pq" and codebooks is None and config.codebooks_path:
        cb_path = Path(config.codebooks_path)
        if not cb_path.is_absolute():
            cb_path = path.parent / cb_path
        if cb_path.exists():
            codebooks = pq.load_codebooks(cb_path)
    if codebooks is not None and config.pq_d is not None and codebooks.d != config.pq_d:
        raise errors.DimensionMismatch(
            f"codebooks d={codebooks.d} does not match index pq_d={config.pq_d}"
        )
    vectors.flags.writeable = False
    return Index(path, config, dim_global, ids, vectors, walked, codebooks)
