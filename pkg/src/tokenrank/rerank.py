"""Stage 2: pairwise re-ranking of the shortlist.

The similarity read out of the language head reduces to a two-way softmax
over the logits of the "1" and "0" answer tokens; that closed form lives here
so every consumer (mock scorer, remote client, service) agrees bit-for-bit.
Re-ranking fuses the normalized stage-1 cosine with the pairwise score using
a fixed convex weight.
"""

from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from . import errors, wire
from .core import RankedItem, RankedList, TokenGrid, rank_order
from .search import Shortlist

ENDPOINT_ENV_VAR = "TOKENRANK_ENDPOINT"

# Built-in prompt templates, selected by id on the wire. The service embeds
# the same texts; changing them is a protocol change.
PROMPT_TEMPLATES: dict[str, str] = {
    "generic": (
        "You are given two images: a query and a candidate. Determine whether "
        "the candidate is similar to the query image.\n"
        "\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
    "object": (
        "You are given two images: a query and a candidate. Determine whether "
        "the exact same object instance from the query image is present in the "
        "candidate image.\n"
        "- The instance must be the same, not just a similar object.\n"
        "- The instance may appear at a different scale, partially occluded, "
        "or among other objects.\n"
        "\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
    "landmark": (
        "You are given two images: a query and a candidate. Determine whether "
        "the exact same landmark, building, or architectural detail from the "
        "query image is present in the candidate image.\n"
        "- The instance must be the same, not just a similar-looking building "
        "or structure.\n"
        "- The query image may show the entire landmark or just a specific, "
        "cropped part of it (like a doorway, statue, or window).\n"
        "- The instance in the candidate image may appear at a different "
        "scale, from a different viewpoint/angle, under different lighting, "
        "or be partially occluded.\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
}


def two_token_similarity(logit_one: float, logit_zero: float) -> float:
    """Probability of the "1" token under a softmax restricted to {"1", "0"}.

    Evaluated in the overflow-free branch of 1 / (1 + exp(l0 - l1)).
    """
    if not (math.isfinite(logit_one) and math.isfinite(logit_zero)):
        raise errors.NonFinite(f"logits must be finite, got ({logit_one}, {logit_zero})")
    delta = logit_zero - logit_one
    if delta <= 0:
        return 1.0 / (1.0 + math.exp(delta))
    e = math.exp(-delta)
    return e / (1.0 + e)


def mock_chamfer_score(query: TokenGrid, cand: TokenGrid) -> float:
    """Deterministic stand-in scorer: normalized one-sided Chamfer cosine.

    Mean over query tokens of the best cosine against candidate tokens,
    mapped from [-1, 1] to [0, 1]. Zero vectors behave as orthogonal to
    everything.
    """
    if query.dim != cand.dim:
        raise errors.DimensionMismatch(f"query D={query.dim} vs candidate D={cand.dim}")
    q = query.tokens.astype(np.float64)
    x = cand.tokens.astype(np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    q = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
    x = np.divide(x, xn, out=np.zeros_like(x), where=xn > 0)
    best = (q @ x.T).max(axis=1)
    return float((best.mean() + 1.0) / 2.0)


MOCK_SCORER_ID = "mock-chamfer/1"


class MockChamferScorer:
    """Scorer backed by :func:`mock_chamfer_score`; ignores the prompt."""

    scorer_id = MOCK_SCORER_ID

    def score_batch(self, query_grid: TokenGrid, candidates, prompt_id: str = "object"):
        return [mock_chamfer_score(query_grid, cand) for cand in candidates]


class ConstantScorer:
    """Returns the same score for every pair; useful for harness checks."""

    def __init__(self, value: float):
        self.value = float(value)
        self.scorer_id = f"constant/{value}"

    def score_batch(self, query_grid, candidates, prompt_id: str = "object"):
        return [self.value] * len(candidates)


@dataclass(frozen=True)
class RemoteConfig:
    """Connection settings for the scoring service."""

    endpoint: str
    prompt_id: str = "object"
    batch_size: int = 8
    max_in_flight: int = 4
    timeout_s: float = 120.0
    retries: int = 2

    def __post_init__(self):
        if self.prompt_id not in PROMPT_TEMPLATES:
            raise errors.OutOfRange(f"unknown prompt_id {self.prompt_id!r}")
        if self.batch_size < 1 or self.max_in_flight < 1 or self.retries < 0:
            raise errors.OutOfRange("bad remote client limits")

    @staticmethod
    def from_env(prompt_id: str = "object", **kwargs) -> "RemoteConfig":
        endpoint = os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise errors.ServiceError(0, f"{ENDPOINT_ENV_VAR} is not set")
        return RemoteConfig(endpoint=endpoint, prompt_id=prompt_id, **kwargs)


class RemoteScorer:
    """HTTP client for the pairwise scoring service.

    Candidates are chunked into batches, sent with bounded concurrency, and
    retried idempotently on transient failures; result order always matches
    candidate order.
    """

    def __init__(self, config: RemoteConfig):
        self.config = config
        self.scorer_id = f"remote/{config.endpoint}"
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post_batch(self, body: dict, expected: int) -> list[float]:
        url = self.config.endpoint.rstrip("/") + "/v1/score"
        attempts = self.config.retries + 1
        last_exc: Exception | None = None
        for _ in range(attempts):
            try:
                resp = self._session().post(url, json=body, timeout=self.config.timeout_s)
            except requests.Timeout as exc:
                last_exc = errors.Timeout(f"score request timed out after {self.config.timeout_s}s")
                last_exc.__cause__ = exc
                continue
            except requests.RequestException as exc:
                last_exc = errors.ServiceError(0, f"cannot reach {url}: {exc}")
                continue
            if resp.status_code in (409, 422):
                raise errors.ProtocolMismatch(self._error_message(resp))
            if resp.status_code != 200:
                last_exc = errors.ServiceError(resp.status_code, self._error_message(resp))
                if 400 <= resp.status_code < 500:
                    raise last_exc  # non-transient; retrying cannot help
                continue
            return self._parse_scores(resp, expected)
        raise last_exc if last_exc is not None else errors.ServiceError(0, "no attempts made")

    @staticmethod
    def _error_message(resp) -> str:
        try:
            return str(resp.json().get("error", resp.text))
        except ValueError:
            return resp.text

    @staticmethod
    def _parse_scores(resp, expected: int) -> list[float]:
        try:
            payload = resp.json()
        except ValueError as exc:
            raise errors.ServiceError(resp.status_code, "non-JSON response") from exc
        if payload.get("protocol") != wire.PROTOCOL_VERSION:
            raise errors.ProtocolMismatch(
                f"service speaks protocol {payload.get('protocol')}, "
                f"client speaks {wire.PROTOCOL_VERSION}"
            )
        scores = payload.get("scores")
        if not isinstance(scores, list) or len(scores) != expected:
            raise errors.ServiceError(resp.status_code, "malformed scores array")
        out = [float(s) for s in scores]
        if any(not math.isfinite(s) or not 0.0 <= s <= 1.0 for s in out):
            raise errors.ServiceError(resp.status_code, "scores outside [0, 1]")
        return out

    def score_batch(self, query_grid: TokenGrid, candidates, prompt_id: str | None = None):
        candidates = list(candidates)
        if not candidates:
            return []
        prompt = prompt_id or self.config.prompt_id
        if prompt not in PROMPT_TEMPLATES:
            raise errors.OutOfRange(f"unknown prompt_id {prompt!r}")
        d = query_grid.dim
        for cand in candidates:
            if cand.dim != d:
                raise errors.DimensionMismatch("candidate token dim differs from query")
        query_payload = wire.grid_to_payload(query_grid)
        chunks = [
            candidates[i : i + self.config.batch_size]
            for i in range(0, len(candidates), self.config.batch_size)
        ]

        def send(chunk) -> list[float]:
            body = {
                "protocol": wire.PROTOCOL_VERSION,
                "d": d,
                "prompt_id": prompt,
                "query": query_payload,
                "candidates": [wire.grid_to_payload(c) for c in chunk],
            }
            return self._post_batch(body, expected=len(chunk))

        if len(chunks) == 1 or self.config.max_in_flight == 1:
            results = [send(chunk) for chunk in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
                results = list(pool.map(send, chunks))
        return [score for chunk_scores in results for score in chunk_scores]


@dataclass(frozen=True)
class FusionConfig:
    """Convex combination weight; stage-1 cosine is first mapped to [0, 1]."""

    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise errors.OutOfRange(f"lambda={self.lam} outside [0, 1]")


def fuse(s_g: float, s_r: float, cfg: FusionConfig) -> float:
    """(1 - lambda) * (s_g + 1)/2 + lambda * s_r."""
    if not -1.0 - 1e-9 <= s_g <= 1.0 + 1e-9:
        raise errors.OutOfRange(f"s_g={s_g} outside [-1, 1]")
    if not -1e-12 <= s_r <= 1.0 + 1e-12:
        raise errors.OutOfRange(f"s_r={s_r} outside [0, 1]")
    s_g = min(1.0, max(-1.0, s_g))
    return (1.0 - cfg.lam) * (s_g + 1.0) / 2.0 + cfg.lam * s_r


def rerank(
    shortlist: Shortlist,
    index,
    query_grid: TokenGrid,
    scorer,
    cfg: FusionConfig = FusionConfig(),
    prompt_id: str = "object",
) -> RankedList:
    """Score the shortlist pairwise and re-sort by the fused similarity.

    Any fetch or scoring failure aborts the whole query; no score is ever
    silently substituted.
    """
    if not shortlist.candidates:
        raise errors.EmptyIndex(f"shortlist for {shortlist.query_id!r} is empty")
    grids = [index.fetch_tokens(image_id) for image_id, _ in shortlist.candidates]
    scores = list(scorer.score_batch(query_grid, grids, prompt_id))
    if len(scores) != len(grids):
        raise errors.ServiceError(0, "scorer returned a short batch")
    items = [
        RankedItem(
            image_id=image_id,
            s_g=s_g,
            s_r=float(s_r),
            s_fused=fuse(s_g, float(s_r), cfg),
        )
        for (image_id, s_g), s_r in zip(shortlist.candidates, scores)
    ]
    return RankedList(shortlist.query_id, tuple(rank_order(items)))
