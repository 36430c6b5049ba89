import os

import numpy as np
import pytest

from tokenrank import errors
from tokenrank.core import GlobalDescriptor, ImageRecord, TokenGrid, dense_grid_positions
from tokenrank.index import IndexConfig, build_index, open_index
from tokenrank.pq import encode, reconstruct, train_codebooks
from tokenrank.tokensel import SelectionConfig, apply_selection

from trhelpers import random_unit


def f16(a):
    return np.asarray(a).astype(np.float16).astype(np.float32)


def make_corpus(rng, n=6, m=12, d=8, d_g=4, rows=4, cols=3):
    records = []
    for i in range(n):
        tokens = f16(rng.standard_normal((m, d)))
        grid = TokenGrid(tokens, dense_grid_positions(rows, cols), rows, cols)
        records.append(
            ImageRecord(f"img{i:03d}", GlobalDescriptor(random_unit(rng, d_g).astype(np.float32)), grid)
        )
    return records


class TestConfigText:
    def test_roundtrip(self):
        for cfg in (
            IndexConfig(),
            IndexConfig(selection=SelectionConfig("prune", target_count=150)),
            IndexConfig(compression="pq", pq_d=16, codebooks_path="cb.pqcb"),
        ):
            parsed = IndexConfig.from_text(cfg.to_text())
            assert parsed.compression == cfg.compression
            assert parsed.pq_d == cfg.pq_d
            assert parsed.selection == cfg.selection
            assert parsed.codebooks_path == cfg.codebooks_path

    def test_codebooks_only_with_pq(self):
        with pytest.raises(errors.OutOfRange):
            IndexConfig(compression="fp16", pq_d=16)
        with pytest.raises(errors.OutOfRange):
            IndexConfig(compression="pq")


class TestBuildAndFetch:
    def test_fp16_roundtrip_bit_exact(self, tmp_path, rng):
        records = make_corpus(rng)
        path = tmp_path / "corpus.tkix"
        report = build_index(records, IndexConfig(), path)
        assert report.num_images == len(records)
        idx = open_index(path)
        assert idx.image_ids == [r.image_id for r in records]
        for rec in records:
            fetched = idx.fetch_tokens(rec.image_id)
            assert fetched == rec.grid  # inputs are f16-representable

    def test_fp16_storage_law(self, tmp_path, rng):
        # One image with 300 tokens at D=3584 stored as float16: 2,150,400 bytes.
        grid = TokenGrid(
            f16(rng.standard_normal((300, 3584))), dense_grid_positions(20, 15), 20, 15
        )
        rec = ImageRecord("big", GlobalDescriptor(random_unit(rng, 8).astype(np.float32)), grid)
        report = build_index([rec], IndexConfig(), tmp_path / "big.tkix")
        assert report.memory.totals.payload_bytes == 2_150_400
        assert report.memory.totals.positions_bytes == 4 * 300

    def test_pq_fetch_equals_direct_composition(self, tmp_path, rng):
        records = make_corpus(rng, n=4, m=10, d=8, rows=5, cols=2)
        train = rng.standard_normal((64, 8)).astype(np.float32)
        cb = train_codebooks(train, d=4, k=16, seed=0)
        cfg = IndexConfig(compression="pq", pq_d=4, codebooks=cb)
        path = tmp_path / "pq.tkix"
        report = build_index(records, cfg, path)
        assert report.memory.totals.payload_bytes == 4 * 10 * (8 // 4)
        idx = open_index(path, codebooks=cb)
        for rec in records:
            expect = reconstruct(encode(rec.grid, cb), cb)
            np.testing.assert_array_equal(idx.fetch_tokens(rec.image_id).tokens, expect)

    def test_codebooks_resolved_from_header_path(self, tmp_path, rng):
        from tokenrank.pq import save_codebooks

        records = make_corpus(rng, n=3, m=6, d=8, rows=3, cols=2)
        cb = train_codebooks(rng.standard_normal((32, 8)).astype(np.float32), d=2, k=8, seed=1)
        save_codebooks(tmp_path / "cb.pqcb", cb)
        cfg = IndexConfig(compression="pq", pq_d=2, codebooks=cb, codebooks_path="cb.pqcb")
        path = tmp_path / "pq.tkix"
        build_index(records, cfg, path)
        idx = open_index(path)  # codebooks found relative to the index
        np.testing.assert_array_equal(
            idx.fetch_tokens("img000").tokens,
            reconstruct(encode(records[0].grid, cb), cb),
        )

    def test_selection_then_compression(self, tmp_path, rng):
        records = make_corpus(rng, n=3, m=12, d=8, rows=4, cols=3)
        sel = SelectionConfig("cluster", target_count=5, seed=7)
        path = tmp_path / "sel.tkix"
        report = build_index(records, IndexConfig(selection=sel), path)
        assert report.memory.totals.payload_bytes == 3 * (2 * 5 * 8)
        idx = open_index(path)
        for rec in records:
            np.testing.assert_array_equal(
                idx.fetch_tokens(rec.image_id).tokens,
                f16(apply_selection(rec.grid, sel).tokens),
            )

    def test_cluster70_fp16_payload_arithmetic(self, tmp_path, rng):
        # 70 tokens at D=3584 in float16: 70 * 2 * 3584 = 501,760 bytes/image.
        grid = TokenGrid(
            f16(rng.standard_normal((80, 3584))), dense_grid_positions(10, 8), 10, 8
        )
        rec = ImageRecord("x", GlobalDescriptor(random_unit(rng, 4).astype(np.float32)), grid)
        sel = SelectionConfig("cluster", target_count=70, seed=0)
        report = build_index([rec], IndexConfig(selection=sel), tmp_path / "c70.tkix")
        assert report.memory.totals.payload_bytes == 501_760

    def test_unknown_id(self, tmp_path, rng):
        records = make_corpus(rng, n=2)
        path = tmp_path / "c.tkix"
        build_index(records, IndexConfig(), path)
        idx = open_index(path)
        with pytest.raises(errors.UnknownId):
            idx.fetch_tokens("nope")

    def test_fetch_order_independent(self, tmp_path, rng):
        records = make_corpus(rng, n=5)
        path = tmp_path / "c.tkix"
        build_index(records, IndexConfig(), path)
        idx = open_index(path)
        forward = [idx.fetch_tokens(r.image_id).tokens.tobytes() for r in records]
        backward = [idx.fetch_tokens(r.image_id).tokens.tobytes() for r in reversed(records)]
        assert forward == backward[::-1]

    def test_parallel_build_matches_serial(self, tmp_path, rng):
        records = make_corpus(rng, n=8)
        a, b = tmp_path / "a.tkix", tmp_path / "b.tkix"
        build_index(records, IndexConfig(), a, jobs=1)
        build_index(records, IndexConfig(), b, jobs=4)
        assert a.read_bytes() == b.read_bytes()

    def test_concurrent_fetch_matches_serial(self, tmp_path, rng):
        from concurrent.futures import ThreadPoolExecutor

        records = make_corpus(rng, n=12)
        path = tmp_path / "c.tkix"
        build_index(records, IndexConfig(), path)
        idx = open_index(path)
        serial = {r.image_id: idx.fetch_tokens(r.image_id).tokens.tobytes() for r in records}
        with ThreadPoolExecutor(max_workers=6) as pool:
            concurrent = dict(
                pool.map(
                    lambda r: (r.image_id, idx.fetch_tokens(r.image_id).tokens.tobytes()),
                    records * 4,
                )
            )
        assert concurrent == serial


class TestOpenErrors:
    def build(self, tmp_path, rng):
        path = tmp_path / "c.tkix"
        build_index(make_corpus(rng, n=3), IndexConfig(), path)
        return path

    def test_truncated_is_corrupt(self, tmp_path, rng):
        path = self.build(tmp_path, rng)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(errors.Corrupt):
            open_index(path)

    def test_bad_magic(self, tmp_path, rng):
        path = self.build(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(errors.BadMagic):
            open_index(path)

    def test_version_bump(self, tmp_path, rng):
        path = self.build(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[4] = 2
        path.write_bytes(bytes(data))
        with pytest.raises(errors.UnsupportedVersion):
            open_index(path)

    def test_payload_flip_detected_at_open(self, tmp_path, rng):
        path = self.build(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises((errors.Corrupt, errors.BadMagic, errors.UnsupportedVersion)):
            open_index(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(errors.IoFailure):
            open_index(tmp_path / "absent.tkix")


class TestMemoryReport:
    def test_empty_index_reports_zero(self, tmp_path):
        path = tmp_path / "empty.tkix"
        build_index([], IndexConfig(), path)
        report = open_index(path).memory_report()
        assert report.num_images == 0
        assert report.totals.image_total == 0
        assert report.per_image.image_total == 0

    def test_additivity_for_identical_shapes(self, tmp_path, rng):
        records = make_corpus(rng, n=10, m=6, d=8, rows=3, cols=2)
        path = tmp_path / "c.tkix"
        build_index(records, IndexConfig(), path)
        report = open_index(path).memory_report()
        assert report.totals.image_total == 10 * report.per_image.image_total
        assert report.totals.payload_bytes == 10 * report.per_image.payload_bytes

    def test_sums_match_file_size_exactly(self, tmp_path, rng):
        for compression in ("fp16", "pq"):
            if compression == "pq":
                cb = train_codebooks(rng.standard_normal((32, 8)).astype(np.float32), d=4, k=8, seed=0)
                cfg = IndexConfig(compression="pq", pq_d=4, codebooks=cb)
            else:
                cfg = IndexConfig()
            path = tmp_path / f"{compression}.tkix"
            records = make_corpus(rng, n=5, m=9, d=8, rows=3, cols=3)
            build_report = build_index(records, cfg, path)
            assert build_report.total_bytes == os.path.getsize(path)
            idx = open_index(path, codebooks=cfg.codebooks)
            mem = idx.memory_report()
            assert mem.total_file_bytes == os.path.getsize(path)
            assert (
                mem.totals.image_total + mem.file_overhead_bytes == mem.total_file_bytes
            )

    def test_pq16_payload_per_image(self, tmp_path, rng):
        # M=300, D=3584, d=16 -> 67,200 payload bytes per image.
        train = rng.standard_normal((4, 3584)).astype(np.float32)
        cb = train_codebooks(train, d=16, k=2, seed=0)
        grid = TokenGrid(
            f16(rng.standard_normal((300, 3584))), dense_grid_positions(20, 15), 20, 15
        )
        rec = ImageRecord("one", GlobalDescriptor(random_unit(rng, 4).astype(np.float32)), grid)
        cfg = IndexConfig(compression="pq", pq_d=16, codebooks=cb)
        report = build_index([rec], cfg, tmp_path / "pq16.tkix")
        assert report.memory.per_image.payload_bytes == 67_200
