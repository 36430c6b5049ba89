"""Command-line entry point wiring the library into batch workflows.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 remote-service
error. Every output file is written atomically, so a failed run leaves no
partial artifact. Flags can also be supplied through a key=value config file
(``--config``); explicit flags win over the file, the file wins over defaults.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dumps, errors, evaluation, robustness
from .core import RankedItem, RankedList, Qrels, validate_corpus
from .fsutil import atomic_write
from .index import BuildReport, IndexConfig, build_index, open_index
from .pq import load_codebooks, mean_reconstruction_error, save_codebooks, train_codebooks
from .rerank import (
    ENDPOINT_ENV_VAR,
    FusionConfig,
    MockChamferScorer,
    RemoteConfig,
    RemoteScorer,
    rerank,
)
from .robustness import PatchStatExtractor, RemoteExtractor, crossing_point, robustness_curve
from .search import DEFAULT_TOPK, TOPK_SWEEP, Shortlist, global_topk
from .tokensel import SelectionConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _fmt(x: float) -> str:
    return repr(float(x))


# --- config-file overlay ----------------------------------------------------

def _parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        values[key.replace("-", "_")] = value
    return values


def _merge_config(args: argparse.Namespace, spec: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = {dest: default for dest, (default, _type) in spec.items()}
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key not in spec:
                raise UsageError(f"unknown config key {key!r} for this command")
            _, conv = spec[key]
            try:
                resolved[key] = conv(raw)
            except (ValueError, TypeError) as exc:
                raise UsageError(f"bad config value for {key!r}: {raw!r}") from exc
    for dest in spec:
        value = getattr(args, dest)
        if value is not None:
            resolved[dest] = value
    return resolved


def _boolish(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _require(resolved: dict, *keys: str) -> None:
    for key in keys:
        if resolved[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _print_config(name: str, resolved: dict, verbose: bool) -> None:
    if verbose:
        for key in sorted(resolved):
            print(f"[{name}] {key} = {resolved[key]}")


# --- ranking CSV interchange -------------------------------------------------

_HEADER_SG = "query_id,rank,image_id,s_g"
_HEADER_FULL = "query_id,rank,image_id,s_g,s_r,s_fused"


def write_ranking_csv(path, per_query_rows: dict[str, list[tuple]], full: bool) -> None:
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write((_HEADER_FULL if full else _HEADER_SG) + "\n")
            for query_id in sorted(per_query_rows):
                for rank, row in enumerate(per_query_rows[query_id], start=1):
                    fh.write(f"{query_id},{rank}," + ",".join(row) + "\n")


def read_ranking_csv(path):
    """Returns (per-query ordered rows, has_rerank_columns)."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise errors.IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0] not in (_HEADER_SG, _HEADER_FULL):
        raise errors.IoFailure(f"{path}: not a ranking CSV")
    full = lines[0] == _HEADER_FULL
    per_query: dict[str, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != (6 if full else 4):
            raise errors.IoFailure(f"{path}:{lineno}: wrong column count")
        query_id, rank_s, image_id = parts[0], parts[1], parts[2]
        rows = per_query.setdefault(query_id, [])
        try:
            rank = int(rank_s)
            scores = [float(p) for p in parts[3:]]
        except ValueError as exc:
            raise errors.IoFailure(f"{path}:{lineno}: bad number") from exc
        if rank != len(rows) + 1:
            raise errors.IoFailure(f"{path}:{lineno}: ranks must be 1..n per query")
        rows.append((image_id, *scores))
    return per_query, full


def _ranked_lists_from_csv(per_query: dict, full: bool) -> list[RankedList]:
    out = []
    for query_id, rows in per_query.items():
        if full:
            items = tuple(
                RankedItem(image_id, s_g, s_r, s_fused) for image_id, s_g, s_r, s_fused in rows
            )
        else:
            items = tuple(RankedItem(image_id, s_g) for image_id, s_g in rows)
        out.append(RankedList(query_id, items))
    return out


# --- subcommands -------------------------------------------------------------

def _cmd_train_pq(resolved: dict) -> int:
    _require(resolved, "dumps", "d", "out")
    ids = dumps.list_dump_ids(resolved["dumps"])
    if not ids:
        raise errors.EmptyCorpus(f"{resolved['dumps']}: no token dumps")
    tokens = [
        dumps.load_record(resolved["dumps"], image_id, need_global=False).grid.tokens
        for image_id in ids
    ]
    vectors = np.concatenate(tokens, axis=0)
    limit = resolved["max_vectors"]
    if limit and vectors.shape[0] > limit:
        keep = np.random.default_rng(resolved["seed"]).choice(
            vectors.shape[0], size=limit, replace=False
        )
        vectors = vectors[np.sort(keep)]
    cb = train_codebooks(
        vectors, d=resolved["d"], k=resolved["k"], seed=resolved["seed"], jobs=resolved["jobs"]
    )
    with atomic_write(resolved["out"]) as tmp:
        save_codebooks(tmp, cb)
    err = mean_reconstruction_error(vectors, cb)
    print(
        f"trained {cb.num_subspaces} subspaces (d={cb.d}, K={cb.k}) "
        f"on {cb.trained_on} vectors; mean reconstruction error {err:.6g}"
    )
    return 0


def _cmd_build_index(resolved: dict) -> int:
    _require(resolved, "dumps", "out")
    records = dumps.load_corpus(resolved["dumps"])
    summary = validate_corpus(records)
    selection = SelectionConfig.from_text(resolved["select"])
    if resolved["compression"] == "pq":
        if not resolved["codebooks"]:
            raise UsageError("--codebooks is required for pq compression")
        cb = load_codebooks(resolved["codebooks"])
        cfg = IndexConfig(
            compression="pq",
            pq_d=cb.d,
            selection=selection,
            codebooks=cb,
            codebooks_path=str(resolved["codebooks"]),
        )
    else:
        cfg = IndexConfig(compression="fp16", selection=selection)
    report: BuildReport = build_index(records, cfg, resolved["out"], jobs=resolved["jobs"])
    print(
        f"indexed {report.num_images} images ({summary.dim_tokens}-d tokens, "
        f"{summary.dim_global}-d globals): {report.total_bytes} bytes total, "
        f"{report.payload_bytes_per_image:.1f} payload + "
        f"{report.overhead_bytes_per_image:.1f} overhead bytes/image"
    )
    return 0


def _load_query_ids(directory, suffix: str) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise errors.IoFailure(f"{directory}: not a directory")
    ids = sorted(p.stem for p in directory.glob(f"*{suffix}"))
    if not ids:
        raise errors.EmptyCorpus(f"{directory}: no {suffix} files")
    return ids


def _cmd_search(resolved: dict) -> int:
    _require(resolved, "index", "queries", "out")
    idx = open_index(resolved["index"])
    query_ids = _load_query_ids(resolved["queries"], dumps.GLOBAL_SUFFIX)

    def run(query_id: str):
        desc = dumps.read_global_sidecar(
            Path(resolved["queries"]) / f"{query_id}{dumps.GLOBAL_SUFFIX}"
        )
        shortlist = global_topk(desc, idx, k=resolved["k"], query_id=query_id)
        return query_id, [(image_id, _fmt(s_g)) for image_id, s_g in shortlist.candidates]

    rows = dict(_map_jobs(run, query_ids, resolved["jobs"]))
    write_ranking_csv(resolved["out"], rows, full=False)
    print(f"searched {len(query_ids)} queries over {len(idx)} images (k={resolved['k']})")
    return 0


def _make_scorer(resolved: dict):
    if resolved["scorer"] == "mock":
        return MockChamferScorer()
    endpoint = resolved["endpoint"] or os.environ.get(ENDPOINT_ENV_VAR)
    if not endpoint:
        raise UsageError(f"remote scorer needs --endpoint or {ENDPOINT_ENV_VAR}")
    return RemoteScorer(
        RemoteConfig(
            endpoint=endpoint,
            prompt_id=resolved["prompt"],
            timeout_s=resolved["timeout"],
            retries=resolved["retries"],
        )
    )


def _cmd_rerank(resolved: dict) -> int:
    _require(resolved, "index", "shortlists", "queries", "out")
    idx = open_index(resolved["index"])
    per_query, _ = read_ranking_csv(resolved["shortlists"])
    scorer = _make_scorer(resolved)
    fusion = FusionConfig(lam=resolved["lam"])

    def run(query_id: str):
        grid = dumps.read_token_dump(
            Path(resolved["queries"]) / f"{query_id}{dumps.DUMP_SUFFIX}"
        )
        shortlist = Shortlist(
            query_id, tuple((row[0], row[1]) for row in per_query[query_id])
        )
        ranked = rerank(shortlist, idx, grid, scorer, fusion, prompt_id=resolved["prompt"])
        return query_id, [
            (it.image_id, _fmt(it.s_g), _fmt(it.s_r), _fmt(it.s_fused)) for it in ranked.items
        ]

    rows = dict(_map_jobs(run, sorted(per_query), resolved["jobs"]))
    write_ranking_csv(resolved["out"], rows, full=True)
    print(f"re-ranked {len(rows)} queries (lambda={resolved['lam']}, scorer={resolved['scorer']})")
    return 0


def _cmd_eval(resolved: dict) -> int:
    _require(resolved, "ranked", "qrels")
    per_query, full = read_ranking_csv(resolved["ranked"])
    ranked_lists = _ranked_lists_from_csv(per_query, full)
    qrels = Qrels.from_tsv(resolved["qrels"])
    report = evaluation.evaluate(ranked_lists, qrels, k=resolved["k"], with_groups=resolved["groups"])
    csv_text = evaluation.report_to_csv(report)
    if resolved["out"]:
        with atomic_write(resolved["out"]) as tmp:
            Path(tmp).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    print(f"mAP@{report.k} = {report.map_at_k:.6f} over {len(report.per_query)} queries")
    return 0


def _cmd_robustness(resolved: dict) -> int:
    _require(resolved, "images", "kind", "out")
    paths = sorted(Path(resolved["images"]).glob("*.png"))
    if not paths:
        raise errors.EmptyCorpus(f"{resolved['images']}: no .png images")
    images = [robustness.load_image(p) for p in paths]
    if resolved["scorer"] == "mock":
        extractor = PatchStatExtractor(seed=resolved["seed"])
        scorer = MockChamferScorer()
    else:
        endpoint = resolved["endpoint"] or os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise UsageError(f"remote scorer needs --endpoint or {ENDPOINT_ENV_VAR}")
        extractor = RemoteExtractor(endpoint, resolution=resolved["resolution"])
        scorer = RemoteScorer(RemoteConfig(endpoint=endpoint, prompt_id=resolved["prompt"]))
    curve = robustness_curve(
        scorer,
        extractor,
        images,
        kind=resolved["kind"],
        n=resolved["n"],
        seed=resolved["seed"],
        prompt_id=resolved["prompt"],
    )
    with atomic_write(resolved["out"]) as tmp:
        Path(tmp).write_text(curve.to_csv(), encoding="utf-8")
    print(f"{resolved['kind']}: {len(curve.points)} factors over {len(images)} images")
    if resolved["baseline"] is not None:
        cross = crossing_point(curve, resolved["baseline"])
        print(f"crossing point at baseline {resolved['baseline']}: {cross}")
    return 0


def _cmd_bench(resolved: dict) -> int:
    _require(resolved, "index", "queries", "out")
    idx = open_index(resolved["index"])
    scorer = _make_scorer(resolved)
    fusion = FusionConfig(lam=resolved["lam"])
    query_ids = _load_query_ids(resolved["queries"], dumps.DUMP_SUFFIX)
    queries = []
    for query_id in query_ids:
        grid = dumps.read_token_dump(Path(resolved["queries"]) / f"{query_id}{dumps.DUMP_SUFFIX}")
        desc_path = Path(resolved["queries"]) / f"{query_id}{dumps.GLOBAL_SUFFIX}"
        if not desc_path.exists():
            raise errors.IoFailure(f"{desc_path}: missing sidecar")
        queries.append((query_id, dumps.read_global_sidecar(desc_path), grid))

    k_values = [int(k) for k in resolved["k_sweep"].split(",") if k.strip()]
    lines = ["k,queries,mean_s,p50_s,p95_s"]
    for k in k_values:
        shortlists = {
            qid: global_topk(desc, idx, k=k, query_id=qid) for qid, desc, _ in queries
        }

        def run_query(query, k_inner):
            qid, _, grid = query
            rerank(shortlists[qid], idx, grid, scorer, fusion, prompt_id=resolved["prompt"])

        timing = evaluation.time_rerank(run_query, queries, k)
        lines.append(
            f"{k},{timing.count},{_fmt(timing.mean_s)},{_fmt(timing.p50_s)},{_fmt(timing.p95_s)}"
        )
        print(f"k={k}: mean {timing.mean_s * 1e3:.2f} ms/query over {timing.count} queries")
    with atomic_write(resolved["out"]) as tmp:
        Path(tmp).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _map_jobs(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# --- parser ------------------------------------------------------------------

def _add_common(sub, spec: dict) -> None:
    sub.add_argument("--config", default=None, help="key=value overlay file")
    sub.add_argument("--verbose", action="store_true", default=False)
    spec["jobs"] = (1, int)
    sub.add_argument("--jobs", type=int, default=None)


def build_parser():
    parser = _Parser(prog="tokenrank", description=__doc__)
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    specs: dict[str, dict] = {}
    handlers = {}

    def register(name, handler, configure):
        sub = subs.add_parser(name)
        spec: dict = {}
        configure(sub, spec)
        _add_common(sub, spec)
        specs[name] = spec
        handlers[name] = handler

    def train_pq(sub, spec):
        spec.update(
            dumps=(None, str), d=(None, int), k=(256, int), seed=(0, int),
            max_vectors=(0, int), out=(None, str),
        )
        sub.add_argument("--dumps")
        sub.add_argument("--d", type=int)
        sub.add_argument("--k", type=int)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--max-vectors", dest="max_vectors", type=int)
        sub.add_argument("--out")

    def build_index_cmd(sub, spec):
        spec.update(
            dumps=(None, str), compression=("fp16", str), codebooks=(None, str),
            select=("none", str), out=(None, str),
        )
        sub.add_argument("--dumps")
        sub.add_argument("--compression", choices=["fp16", "pq"])
        sub.add_argument("--codebooks")
        sub.add_argument("--select")
        sub.add_argument("--out")

    def search_cmd(sub, spec):
        spec.update(index=(None, str), queries=(None, str), k=(DEFAULT_TOPK, int), out=(None, str))
        sub.add_argument("--index")
        sub.add_argument("--queries")
        sub.add_argument("--k", type=int)
        sub.add_argument("--out")

    def rerank_cmd(sub, spec):
        spec.update(
            index=(None, str), shortlists=(None, str), queries=(None, str),
            scorer=("mock", str), endpoint=(None, str), prompt=("object", str),
            lam=(0.5, float), timeout=(120.0, float), retries=(2, int), out=(None, str),
        )
        sub.add_argument("--index")
        sub.add_argument("--shortlists")
        sub.add_argument("--queries")
        sub.add_argument("--scorer", choices=["mock", "remote"])
        sub.add_argument("--endpoint")
        sub.add_argument("--prompt", choices=["generic", "object", "landmark"])
        sub.add_argument("--lambda", dest="lam", type=float)
        sub.add_argument("--timeout", type=float)
        sub.add_argument("--retries", type=int)
        sub.add_argument("--out")

    def eval_cmd(sub, spec):
        spec.update(
            ranked=(None, str), qrels=(None, str), k=(DEFAULT_TOPK, int),
            groups=(False, _boolish), out=(None, str),
        )
        sub.add_argument("--ranked")
        sub.add_argument("--qrels")
        sub.add_argument("--k", type=int)
        sub.add_argument("--groups", action="store_const", const=True, default=None)
        sub.add_argument("--out")

    def robustness_cmd(sub, spec):
        spec.update(
            images=(None, str), kind=(None, str), n=(11, int), scorer=("mock", str),
            endpoint=(None, str), prompt=("object", str), baseline=(None, float),
            seed=(0, int), resolution=(560, int), out=(None, str),
        )
        sub.add_argument("--images")
        sub.add_argument("--kind", choices=list(robustness.KINDS))
        sub.add_argument("--n", type=int)
        sub.add_argument("--scorer", choices=["mock", "remote"])
        sub.add_argument("--endpoint")
        sub.add_argument("--prompt", choices=["generic", "object", "landmark"])
        sub.add_argument("--baseline", type=float)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--resolution", type=int)
        sub.add_argument("--out")

    def bench_cmd(sub, spec):
        spec.update(
            index=(None, str), queries=(None, str),
            k_sweep=(",".join(str(k) for k in TOPK_SWEEP), str),
            scorer=("mock", str), endpoint=(None, str), prompt=("object", str),
            lam=(0.5, float), timeout=(120.0, float), retries=(2, int), out=(None, str),
        )
        sub.add_argument("--index")
        sub.add_argument("--queries")
        sub.add_argument("--k-sweep", dest="k_sweep")
        sub.add_argument("--scorer", choices=["mock", "remote"])
        sub.add_argument("--endpoint")
        sub.add_argument("--prompt", choices=["generic", "object", "landmark"])
        sub.add_argument("--lambda", dest="lam", type=float)
        sub.add_argument("--timeout", type=float)
        sub.add_argument("--retries", type=int)
        sub.add_argument("--out")

    register("train-pq", _cmd_train_pq, train_pq)
    register("build-index", _cmd_build_index, build_index_cmd)
    register("search", _cmd_search, search_cmd)
    register("rerank", _cmd_rerank, rerank_cmd)
    register("eval", _cmd_eval, eval_cmd)
    register("robustness", _cmd_robustness, robustness_cmd)
    register("bench", _cmd_bench, bench_cmd)
    return parser, specs, handlers


def main(argv=None) -> int:
    parser, specs, handlers = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required (see --help)")
        resolved = _merge_config(args, specs[args.command])
        _print_config(args.command, resolved, args.verbose)
        return handlers[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except errors.RemoteError as exc:
        print(f"remote-service error: {exc}", file=sys.stderr)
        return 3
    except errors.TokenRankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
