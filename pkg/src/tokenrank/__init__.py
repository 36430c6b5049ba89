"""tokenrank: memory-efficient two-stage instance-level image retrieval.

Stage 1 runs an exhaustive cosine search over compact global descriptors;
stage 2 re-ranks the shortlist with a pluggable pairwise token scorer over a
compressed on-disk token index.
"""

from . import errors
from .core import (
    CorpusSummary,
    GlobalDescriptor,
    ImageRecord,
    Qrels,
    RankedItem,
    RankedList,
    TokenGrid,
    dense_grid_positions,
    validate_corpus,
)
from .evaluation import EvalReport, ap_at_k, evaluate, negative_baseline, time_rerank
from .index import IndexConfig, build_index, open_index
from .pq import PqCodebooks, PqCodes, encode, load_codebooks, reconstruct, save_codebooks, train_codebooks
from .rerank import (
    FusionConfig,
    MockChamferScorer,
    PROMPT_TEMPLATES,
    RemoteConfig,
    RemoteScorer,
    fuse,
    mock_chamfer_score,
    rerank,
    two_token_similarity,
)
from .robustness import (
    Image,
    PatchStatExtractor,
    TransformSpec,
    apply_transform,
    crossing_point,
    factor_grid,
    robustness_curve,
)
from .search import Shortlist, global_topk
from .tokensel import (
    SelectionConfig,
    pool_average_2x2,
    prune_divprune,
    sample_uniform_2x2,
    select_kmeans,
)

__version__ = "0.1.0"

__all__ = [
    "CorpusSummary",
    "EvalReport",
    "FusionConfig",
    "GlobalDescriptor",
    "Image",
    "ImageRecord",
    "IndexConfig",
    "MockChamferScorer",
    "PatchStatExtractor",
    "PqCodebooks",
    "PqCodes",
    "PROMPT_TEMPLATES",
    "Qrels",
    "RankedItem",
    "RankedList",
    "RemoteConfig",
    "RemoteScorer",
    "SelectionConfig",
    "Shortlist",
    "TokenGrid",
    "TransformSpec",
    "ap_at_k",
    "apply_transform",
    "build_index",
    "crossing_point",
    "dense_grid_positions",
    "encode",
    "errors",
    "evaluate",
    "factor_grid",
    "fuse",
    "global_topk",
    "load_codebooks",
    "mock_chamfer_score",
    "negative_baseline",
    "open_index",
    "pool_average_2x2",
    "prune_divprune",
    "reconstruct",
    "rerank",
    "robustness_curve",
    "sample_uniform_2x2",
    "save_codebooks",
    "select_kmeans",
    "time_rerank",
    "train_codebooks",
    "two_token_similarity",
    "validate_corpus",
]
