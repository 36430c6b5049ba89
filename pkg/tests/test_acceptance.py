"""Acceptance suite: one test per release criterion, each printing a PASS line.

Every tolerance is pinned here. Oracles are coded inline and independently of
the library paths they check (plain-loop AP, greedy max-min reference,
distance-table nearest centroid, index-free pipeline replay).

Run with ``pytest tests/test_acceptance.py -v`` (PASS lines print unbuffered).
"""

import math
import time

import numpy as np
import pytest

import trhelpers

from tokenrank import dumps, errors
from tokenrank.cli import main as cli_main
from tokenrank.cli import read_ranking_csv
from tokenrank.core import (
    GlobalDescriptor,
    ImageRecord,
    TokenGrid,
    dense_grid_positions,
)
from tokenrank.evaluation import ap_at_k, evaluate
from tokenrank.index import IndexConfig, build_index, open_index
from tokenrank.pq import PqCodes, encode, mean_reconstruction_error, train_codebooks
from tokenrank.rerank import (
    FusionConfig,
    MockChamferScorer,
    RemoteConfig,
    RemoteScorer,
    mock_chamfer_score,
    rerank,
    two_token_similarity,
)
from tokenrank.robustness import (
    PAD,
    Image,
    TransformSpec,
    apply_transform,
    crossing_point,
    factor_grid,
)
from tokenrank.search import Shortlist, global_topk
from tokenrank.synthetic import planted_corpus
from tokenrank.tokensel import pool_average_2x2, prune_divprune, sample_uniform_2x2

from trhelpers import make_grid


def _pass(criterion: int, message: str) -> None:
    line = f"ACCEPTANCE {criterion:2d} PASS - {message}"
    print(line)
    trhelpers.ACCEPTANCE_LINES.append(line)


def f16(a):
    return np.asarray(a).astype(np.float16).astype(np.float32)


def test_c1_storage_laws(tmp_path):
    """fp16 payload is 2*M*D bytes (2,150,400 at M=300, D=3584); PQ is M*D/d."""
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    m, dim = 300, 3584
    grid = TokenGrid(f16(rng.standard_normal((m, dim))), dense_grid_positions(20, 15), 20, 15)
    unit = np.zeros(8, dtype=np.float32)
    unit[0] = 1.0
    record = ImageRecord("img", GlobalDescriptor(unit), grid)

    report = build_index([record], IndexConfig(), tmp_path / "fp16.tkix")
    assert report.memory.totals.payload_bytes == 2_150_400

    train = rng.standard_normal((4, dim)).astype(np.float32)
    for d in (4, 8, 16, 32, 64, 128):
        cb = train_codebooks(train, d=d, k=2, seed=0)
        codes = encode(grid, cb)
        assert codes.nbytes() == m * dim // d
        cfg = IndexConfig(compression="pq", pq_d=d, codebooks=cb)
        pq_report = build_index([record], cfg, tmp_path / f"pq{d}.tkix")
        assert pq_report.memory.totals.payload_bytes == m * dim // d

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"storage-law check took {elapsed:.2f}s"
    _pass(1, f"storage laws exact for fp16 and d in 4..128 ({elapsed:.2f}s)")


def test_c2_pq_oracle():
    """Encode matches a distance-table argmin; error shrinks with more subspaces."""
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    vectors = rng.standard_normal((1000, 16)).astype(np.float32)
    grid = make_grid(vectors)
    mismatches = 0
    for d, k in ((2, 16), (2, 5), (4, 16), (4, 9)):
        cb = train_codebooks(rng.standard_normal((400, 16)).astype(np.float32), d=d, k=k, seed=d + k)
        codes = encode(grid, cb).codes
        for s in range(cb.num_subspaces):
            sub = vectors[:, s * d : (s + 1) * d].astype(np.float64)
            cents = cb.centroids[s].astype(np.float64)
            table = ((sub[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
            mismatches += int(np.sum(codes[:, s] != np.argmin(table, axis=1)))
    assert mismatches == 0

    corpus = np.random.default_rng(2).standard_normal((300, 8)).astype(np.float32)
    errs = [
        mean_reconstruction_error(corpus, train_codebooks(corpus, d=d, k=16, seed=3))
        for d in (8, 4, 2, 1)
    ]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])), errs

    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    _pass(2, f"PQ nearest-centroid exact on 1000 vectors; error monotone over d=8,4,2,1 ({elapsed:.2f}s)")


def _reference_maxmin(tokens, m):
    n = len(tokens)
    tokens = [np.asarray(t, dtype=np.float64) for t in tokens]

    def dist(a, b):
        return math.sqrt(float(np.sum((tokens[a] - tokens[b]) ** 2)))

    nearest = [min(dist(i, j) for j in range(n) if j != i) for i in range(n)]
    best = max(range(n), key=lambda i: (nearest[i], -i))
    selected = [best]
    while len(selected) < m:
        remaining = [i for i in range(n) if i not in selected]
        nxt = max(remaining, key=lambda i: (min(dist(i, j) for j in selected), -i))
        selected.append(nxt)
    return sorted(selected)


def test_c3_divprune_oracle():
    """Greedy max-min pruning equals the plain-loop reference on 500 instances."""
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    for trial in range(500):
        n = int(rng.integers(2, 11))
        m = int(rng.integers(1, min(n, 5) + 1))
        grid = make_grid(rng.standard_normal((n, 3)).astype(np.float32))
        out = prune_divprune(grid, m)
        keep = _reference_maxmin(grid.tokens, m)
        assert np.array_equal(out.tokens, grid.tokens[keep]), f"trial {trial}"
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    _pass(3, f"diverse pruning equals greedy reference on 500 instances ({elapsed:.2f}s)")


def test_c4_selection_arithmetic():
    """sample2x2 and pool2x2 produce ceil(R/2)*ceil(C/2) tokens for R,C <= 9."""
    rng = np.random.default_rng(5)
    for rows in range(1, 10):
        for cols in range(1, 10):
            grid = TokenGrid(
                rng.standard_normal((rows * cols, 4)).astype(np.float32),
                dense_grid_positions(rows, cols),
                rows,
                cols,
            )
            expect = math.ceil(rows / 2) * math.ceil(cols / 2)
            assert sample_uniform_2x2(grid).num_tokens == expect
            assert pool_average_2x2(grid).num_tokens == expect
    _pass(4, "2x2 sampling and pooling counts exact for all grids up to 9x9")


def test_c5_two_token_math():
    """Softmax-pair identities: complement, shift invariance, closed-form point."""
    rng = np.random.default_rng(6)
    for _ in range(5000):
        a, b = rng.uniform(-200, 200, size=2)
        assert abs(two_token_similarity(a, b) + two_token_similarity(b, a) - 1.0) <= 1e-12
    for _ in range(2000):
        a, b = rng.uniform(-10, 10, size=2)
        c = rng.uniform(-1e6, 1e6)
        assert abs(two_token_similarity(a + c, b + c) - two_token_similarity(a, b)) <= 1e-9
    assert abs(two_token_similarity(1.0, -1.0) - 0.8807970779778823) <= 1e-12
    _pass(5, "two-token softmax: complement 1e-12, shift invariance 1e-9, point value 1e-12")


def _loop_ap(ranked_ids, positives, k):
    positives = set(positives)
    total = 0.0
    hits = 0
    for rank in range(1, min(k, len(ranked_ids)) + 1):
        if ranked_ids[rank - 1] in positives:
            hits += 1
            total += hits / rank
    return total / min(len(positives), k)


def test_c6_map_oracle_and_fusion_endpoints(tmp_path):
    """mAP matches a plain-loop AP on 1000 fuzzed rankings; lambda endpoints exact."""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        ids = [f"d{i}" for i in range(n)]
        rng.shuffle(ids)
        num_pos = int(rng.integers(1, 11))
        pool = [f"d{i}" for i in range(n + 10)]
        positives = set(rng.choice(pool, size=num_pos, replace=False))
        k = int(rng.integers(1, 130))
        assert abs(ap_at_k(ids, positives, k) - _loop_ap(ids, positives, k)) <= 1e-12

    # Fusion endpoints over a real index.
    records = []
    for i in range(12):
        tokens = f16(rng.standard_normal((6, 8)))
        v = rng.standard_normal(5)
        records.append(
            ImageRecord(
                f"c{i:02d}",
                GlobalDescriptor.normalized(v),
                TokenGrid(tokens, dense_grid_positions(6, 1), 6, 1),
            )
        )
    path = tmp_path / "fusion.tkix"
    build_index(records, IndexConfig(), path)
    idx = open_index(path)
    query_grid = make_grid(f16(rng.standard_normal((6, 8))))
    query = GlobalDescriptor.normalized(rng.standard_normal(5))
    shortlist = global_topk(query, idx, k=12)

    lam0 = rerank(shortlist, idx, query_grid, MockChamferScorer(), FusionConfig(lam=0.0))
    assert lam0.image_ids() == shortlist.image_ids()

    lam1 = rerank(shortlist, idx, query_grid, MockChamferScorer(), FusionConfig(lam=1.0))
    scorer_only = sorted(
        ((cid, mock_chamfer_score(query_grid, idx.fetch_tokens(cid))) for cid, _ in shortlist.candidates),
        key=lambda t: (-t[1], t[0]),
    )
    assert lam1.image_ids() == [cid for cid, _ in scorer_only]
    _pass(6, "mAP equals loop oracle on 1000 instances; lambda 0/1 reproduce stage orders")


def _oracle_pipeline_map(corpus, k, lam, reconstructor=None):
    """Index-free replay: raw arrays, inline chamfer, inline AP."""
    db_ids = [r.image_id for r in corpus.database]
    globals_matrix = np.stack([r.global_desc.vector for r in corpus.database]).astype(np.float64)
    grids = {
        r.image_id: (reconstructor(r.grid) if reconstructor else r.grid) for r in corpus.database
    }

    def chamfer(q, x):
        qv = q.tokens.astype(np.float64)
        xv = x.tokens.astype(np.float64)
        qv = qv / np.linalg.norm(qv, axis=1, keepdims=True)
        xv = xv / np.linalg.norm(xv, axis=1, keepdims=True)
        return (float((qv @ xv.T).max(axis=1).mean()) + 1.0) / 2.0

    ap_values = []
    ap_global = []
    for q in corpus.queries:
        s_g = np.clip(globals_matrix @ q.global_desc.vector.astype(np.float64), -1.0, 1.0)
        order = sorted(range(len(db_ids)), key=lambda i: (-s_g[i], db_ids[i]))[:k]
        positives = corpus.qrels.positives(q.image_id)
        ap_global.append(_loop_ap([db_ids[i] for i in order], positives, k))
        fused = sorted(
            (
                (db_ids[i], (1 - lam) * (s_g[i] + 1) / 2 + lam * chamfer(q.grid, grids[db_ids[i]]))
                for i in order
            ),
            key=lambda t: (-t[1], t[0]),
        )
        ap_values.append(_loop_ap([cid for cid, _ in fused], positives, k))
    return float(np.mean(ap_global)), float(np.mean(ap_values))


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    corpus = planted_corpus(seed=0)
    (root / "db").mkdir()
    (root / "queries").mkdir()
    for rec in corpus.database:
        dumps.write_record(root / "db", rec)
    for rec in corpus.queries:
        dumps.write_record(root / "queries", rec)
    corpus.qrels.to_tsv(root / "qrels.tsv")
    return root, corpus


def _read_map_from_eval_csv(path):
    first = path.read_text(encoding="utf-8").splitlines()[0].split(",")
    assert first[0] == "summary"
    return float(first[2])


def test_c7_end_to_end_mock_pipeline(planted):
    """Full CLI chain beats its own stage 1 and matches the index-free oracle."""
    start = time.perf_counter()
    root, corpus = planted
    k, lam = 50, 0.5

    def cli(args):
        assert cli_main([str(a) for a in args]) == 0

    index = root / "corpus.tkix"
    shortlists = root / "short.csv"
    ranked = root / "ranked.csv"
    cli(["build-index", "--dumps", root / "db", "--compression", "fp16", "--out", index])
    cli(["search", "--index", index, "--queries", root / "queries", "--k", k, "--out", shortlists])
    cli(["rerank", "--index", index, "--shortlists", shortlists, "--queries", root / "queries",
         "--scorer", "mock", "--lambda", lam, "--out", ranked])
    cli(["eval", "--ranked", ranked, "--qrels", root / "qrels.tsv", "--k", k,
         "--out", root / "eval_rerank.csv"])
    cli(["eval", "--ranked", shortlists, "--qrels", root / "qrels.tsv", "--k", k,
         "--out", root / "eval_global.csv"])

    map_rerank = _read_map_from_eval_csv(root / "eval_rerank.csv")
    map_global = _read_map_from_eval_csv(root / "eval_global.csv")
    assert map_rerank > map_global, (map_rerank, map_global)

    oracle_global, oracle_rerank = _oracle_pipeline_map(corpus, k, lam)
    assert abs(map_global - oracle_global) <= 1e-9
    assert abs(map_rerank - oracle_rerank) <= 1e-9

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _pass(
        7,
        f"CLI chain mAP@50 {map_rerank:.4f} > no-rerank {map_global:.4f}, "
        f"oracle match 1e-9 ({elapsed:.1f}s)",
    )


def test_c8_compression_degradation(planted):
    """PQ d=4 stays within 0.05 of fp16; a single 8-centroid subspace hurts more."""
    root, corpus = planted
    k, lam = 50, 0.5
    train = np.concatenate([r.grid.tokens for r in corpus.database])

    def pipeline_map(cfg, codebooks, name):
        path = root / f"{name}.tkix"
        build_index(corpus.database, cfg, path)
        idx = open_index(path, codebooks=codebooks)
        scorer = MockChamferScorer()
        fusion = FusionConfig(lam=lam)
        ranked_lists = []
        for q in corpus.queries:
            shortlist = global_topk(q.global_desc, idx, k=k, query_id=q.image_id)
            ranked_lists.append(rerank(shortlist, idx, q.grid, scorer, fusion))
        return evaluate(ranked_lists, corpus.qrels, k=k).map_at_k

    map_fp16 = pipeline_map(IndexConfig(), None, "fp16")
    cb4 = train_codebooks(train, d=4, k=256, seed=0)
    map_pq4 = pipeline_map(IndexConfig(compression="pq", pq_d=4, codebooks=cb4), cb4, "pq4")
    d_full = train.shape[1]
    cb_full = train_codebooks(train, d=d_full, k=8, seed=0)
    map_pq_full = pipeline_map(
        IndexConfig(compression="pq", pq_d=d_full, codebooks=cb_full), cb_full, "pqfull"
    )

    assert abs(map_fp16 - map_pq4) <= 0.05, (map_fp16, map_pq4)
    assert (map_fp16 - map_pq_full) > (map_fp16 - map_pq4), (map_fp16, map_pq4, map_pq_full)
    _pass(
        8,
        f"compression: fp16 {map_fp16:.4f}, pq4 {map_pq4:.4f} (gap <= 0.05), "
        f"single-subspace {map_pq_full:.4f} degrades more",
    )


def test_c9_index_roundtrip_and_fuzz(tmp_path):
    """fp16 fetch is bit-exact for 100 images; 100 byte flips never pass silently."""
    rng = np.random.default_rng(8)
    records = []
    for i in range(100):
        tokens = f16(rng.standard_normal((12, 16)))
        records.append(
            ImageRecord(
                f"im{i:03d}",
                GlobalDescriptor.normalized(rng.standard_normal(6)),
                TokenGrid(tokens, dense_grid_positions(4, 3), 4, 3),
            )
        )
    path = tmp_path / "fuzz.tkix"
    build_index(records, IndexConfig(), path)
    idx = open_index(path)
    for rec in records:
        assert idx.fetch_tokens(rec.image_id) == rec.grid

    pristine = path.read_bytes()
    flip_positions = rng.choice(len(pristine), size=100, replace=False)
    for pos in flip_positions:
        damaged = bytearray(pristine)
        damaged[pos] ^= 1 + int(rng.integers(0, 255))
        path.write_bytes(bytes(damaged))
        with pytest.raises((errors.BadMagic, errors.UnsupportedVersion, errors.Corrupt)):
            opened = open_index(path)
            for rec in records:  # pragma: no cover - open must already have raised
                opened.fetch_tokens(rec.image_id)
    _pass(9, "roundtrip bit-exact on 100 images; all 100 byte flips rejected")


def test_c10_robustness_harness():
    """Identity factors, the 180-degree involution, crossings, and grid ranges."""
    rng = np.random.default_rng(9)
    photo = Image(rng.integers(0, 256, size=(32, 40, 3), dtype=np.uint8))
    for kind, factor in (("contrast", 1.0), ("occlusion", 0.0), ("noise", 0.0)):
        out = apply_transform(photo, TransformSpec(kind, factor, seed=1))
        assert np.array_equal(out.pixels[PAD:-PAD, PAD:-PAD], photo.pixels)
        assert out.pixels.shape == (photo.height + 2 * PAD, photo.width + 2 * PAD, 3)

    pattern = Image(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
    once = apply_transform(pattern, TransformSpec("rotation", 180.0))
    twice = apply_transform(once, TransformSpec("rotation", 180.0))
    assert np.array_equal(twice.pixels[2 * PAD : 2 * PAD + 16, 2 * PAD : 2 * PAD + 16], pattern.pixels)

    for _ in range(100):
        n = int(rng.integers(2, 10))
        factors = np.cumsum(rng.uniform(0.1, 1.0, size=n))
        values = rng.uniform(0, 1, size=n)
        baseline = float(rng.uniform(0.1, 0.9))
        got = crossing_point(list(zip(factors, values)), baseline)
        expect = None
        for i in range(n):
            if values[i] < baseline:
                if i == 0:
                    expect = float(factors[0])
                else:
                    expect = float(
                        factors[i - 1]
                        + (values[i - 1] - baseline)
                        * (factors[i] - factors[i - 1])
                        / (values[i - 1] - values[i])
                    )
                break
        if expect is None:
            assert got is None
        else:
            assert abs(got - expect) <= 1e-12

    assert factor_grid("blur", 15).tolist() == list(range(1, 16))
    assert factor_grid("clutter", 28).tolist() == list(range(1, 29))
    occ = factor_grid("occlusion", 11)
    assert occ[0] == 0.0 and occ[-1] == 1.0
    np.testing.assert_allclose(occ, np.arange(11) / 10.0, atol=1e-12)
    _pass(10, "padded identities, 180-degree involution, crossings 1e-12, grids exact")


def test_c11_remote_client_contract(stub_server):
    """Batching transparency, retry-then-succeed, protocol mismatch surfaced."""
    start = time.perf_counter()
    state, endpoint = stub_server
    rng = np.random.default_rng(10)
    query = make_grid(rng.standard_normal((3, 4)).astype(np.float32))
    candidates = [make_grid(rng.standard_normal((3, 4)).astype(np.float32)) for _ in range(19)]

    state.score_fn = lambda q, c: (0.0, float(np.tanh(c.sum())))
    batch1 = RemoteScorer(RemoteConfig(endpoint=endpoint, batch_size=1, timeout_s=5))
    batch8 = RemoteScorer(RemoteConfig(endpoint=endpoint, batch_size=8, timeout_s=5))
    assert batch1.score_batch(query, candidates) == batch8.score_batch(query, candidates)

    state.fail_next = 2
    retrying = RemoteScorer(RemoteConfig(endpoint=endpoint, retries=2, batch_size=64, timeout_s=5))
    scores = retrying.score_batch(query, candidates)
    assert len(scores) == len(candidates)

    state.protocol = 99
    with pytest.raises(errors.ProtocolMismatch):
        batch8.score_batch(query, candidates[:2])
    state.protocol = 1

    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    _pass(11, f"remote client: batch transparency, retries, protocol check ({elapsed:.2f}s)")
