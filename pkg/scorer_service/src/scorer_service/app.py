"""HTTP surface: /v1/health, /v1/extract, /v1/score."""

from __future__ import annotations

import io
import threading
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from PIL import Image as PilImage
from pydantic import BaseModel, Field

from .backends import TokenPayload, decode_f16_b64, encode_f16_b64, make_backend, stable_pair_softmax
from .config import EFFECTIVE_PATCH, ServiceConfig
from .prompts import PROMPT_TEMPLATES, PROMPTS_VERSION

PROTOCOL_VERSION = 1


class GridPayload(BaseModel):
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    positions: list[list[int]]
    tokens_b64: str


class ScoreRequest(BaseModel):
    protocol: int
    d: int
    prompt_id: str = "object"
    query: GridPayload
    candidates: list[GridPayload]


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _to_payload(grid: GridPayload, d: int) -> TokenPayload:
    positions = np.asarray(grid.positions, dtype=np.int32)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError("positions must be [row, col] pairs")
    tokens = decode_f16_b64(grid.tokens_b64, len(positions), d)
    return TokenPayload(tokens, positions, grid.rows, grid.cols)


def create_app(config: ServiceConfig | None = None, backend=None) -> FastAPI:
    config = config or ServiceConfig()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if app.state.backend is None:
            app.state.backend = make_backend(config.model, device=config.device)
        yield

    app = FastAPI(title="scorer-service", lifespan=lifespan)
    app.state.backend = backend
    app.state.config = config
    app.state.gate = threading.Semaphore(config.max_concurrency)

    def current_backend():
        return app.state.backend

    @app.get("/v1/health")
    def health():
        b = current_backend()
        if b is None:
            return _error(503, "model loading")
        return {
            "protocol": PROTOCOL_VERSION,
            "d": b.dim,
            "model": b.model_id,
            "prompts_version": PROMPTS_VERSION,
        }

    @app.post("/v1/extract")
    async def extract(request: Request, resolution: int | None = Query(default=None)):
        b = current_backend()
        if b is None:
            return _error(503, "model loading")
        res = resolution if resolution is not None else config.resolution
        if res < EFFECTIVE_PATCH or res % EFFECTIVE_PATCH != 0:
            return _error(422, f"resolution must be a positive multiple of {EFFECTIVE_PATCH}")
        body = await request.body()
        if not body:
            return _error(400, "empty image body")
        try:
            with PilImage.open(io.BytesIO(body)) as img:
                pixels = np.asarray(img.convert("RGB"))
        except Exception:
            return _error(400, "undecodable image")
        with app.state.gate:
            payload, global_desc = b.extract(pixels, res)
        return {
            "protocol": PROTOCOL_VERSION,
            "m": int(payload.tokens.shape[0]),
            "d": int(payload.tokens.shape[1]),
            "rows": payload.rows,
            "cols": payload.cols,
            "positions": payload.positions.tolist(),
            "tokens_b64": encode_f16_b64(payload.tokens),
            "global_b64": encode_f16_b64(global_desc[None, :]),
            "global_dim": int(global_desc.shape[0]),
        }

    @app.post("/v1/score")
    def score(body: ScoreRequest):
        b = current_backend()
        if b is None:
            return _error(503, "model loading")
        if body.protocol != PROTOCOL_VERSION:
            return _error(409, f"protocol {body.protocol} not supported (want {PROTOCOL_VERSION})")
        if body.d != b.dim:
            return _error(422, f"token dim {body.d} does not match model dim {b.dim}")
        if body.prompt_id not in PROMPT_TEMPLATES:
            return _error(422, f"unknown prompt_id {body.prompt_id!r}")
        if len(body.candidates) > config.max_candidates:
            return _error(422, f"at most {config.max_candidates} candidates per request")
        prompt_text = PROMPT_TEMPLATES[body.prompt_id]
        try:
            query = _to_payload(body.query, body.d)
            candidates = [_to_payload(c, body.d) for c in body.candidates]
        except ValueError as exc:
            return _error(422, str(exc))
        try:
            with app.state.gate:
                logits = [
                    b.score(query, cand, prompt_text, config.shuffle_positions)
                    for cand in candidates
                ]
        except ValueError as exc:
            return _error(422, str(exc))
        except Exception as exc:  # model failure
            return _error(500, f"scoring failed: {exc}")
        scores = [stable_pair_softmax(l1, l0) for l0, l1 in logits]
        return {
            "protocol": PROTOCOL_VERSION,
            "scores": scores,
            "logits": [[l0, l1] for l0, l1 in logits],
        }

    return app
