"""JSON wire encoding shared by the scoring client, extractors, and test stubs.

Token matrices travel as base64 of little-endian float16, row-major (M, D);
positions as [[row, col], ...] lists.
"""

from __future__ import annotations

import base64

import numpy as np

from . import errors
from .core import TokenGrid

PROTOCOL_VERSION = 1


def encode_tokens(tokens: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(tokens, dtype="<f2").tobytes()).decode("ascii")


def decode_tokens(data: str, m: int, d: int) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    if len(raw) != m * d * 2:
        raise errors.ProtocolMismatch(f"token payload has {len(raw)} bytes, expected {m * d * 2}")
    return np.frombuffer(raw, dtype="<f2").reshape(m, d).astype(np.float32)


def grid_to_payload(grid: TokenGrid) -> dict:
    return {
        "rows": grid.grid_rows,
        "cols": grid.grid_cols,
        "positions": grid.positions.tolist(),
        "tokens_b64": encode_tokens(grid.tokens),
    }


def payload_to_grid(payload: dict, d: int) -> TokenGrid:
    positions = np.asarray(payload["positions"], dtype=np.int32)
    tokens = decode_tokens(payload["tokens_b64"], len(positions), d)
    return TokenGrid(tokens, positions, payload["rows"], payload["cols"])
