"""Scoring backends: a deterministic reference backend plus helpers.

A backend turns images into visual token grids and turns (query, candidate,
prompt) triples into a pair of answer-token logits. The service reads the
"1"-token probability out of a softmax restricted to the two answer tokens;
that math lives in :func:`stable_pair_softmax` and is exact and overflow-free.
"""

from __future__ import annotations

import base64
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PilImage

from .config import EFFECTIVE_PATCH


def stable_pair_softmax(logit_one: float, logit_zero: float) -> float:
    """exp(l1) / (exp(l0) + exp(l1)), evaluated without overflow."""
    delta = logit_zero - logit_one
    if delta <= 0:
        return 1.0 / (1.0 + math.exp(delta))
    e = math.exp(-delta)
    return e / (1.0 + e)


def encode_f16_b64(tokens: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(tokens, dtype="<f2").tobytes()).decode("ascii")


def decode_f16_b64(data: str, m: int, d: int) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    if len(raw) != m * d * 2:
        raise ValueError(f"token payload has {len(raw)} bytes, expected {m * d * 2}")
    return np.frombuffer(raw, dtype="<f2").reshape(m, d).astype(np.float32)


@dataclass(frozen=True)
class TokenPayload:
    tokens: np.ndarray     # (M, D) float32
    positions: np.ndarray  # (M, 2) int32, (row, col)
    rows: int
    cols: int


def snap_resize(width: int, height: int, resolution: int) -> tuple[int, int]:
    """Target size: longer side equals resolution, both sides multiples of 28."""
    scale = resolution / max(width, height)
    out_w = max(EFFECTIVE_PATCH, round(width * scale / EFFECTIVE_PATCH) * EFFECTIVE_PATCH)
    out_h = max(EFFECTIVE_PATCH, round(height * scale / EFFECTIVE_PATCH) * EFFECTIVE_PATCH)
    return out_w, out_h


class PatchStatBackend:
    """Deterministic vision backend: cell statistics under fixed projections.

    Produces tokens with the same shape contract as the full multimodal model
    (one token per 28x28 cell of the resized image, D=3584) and scores pairs
    through a joint summary vector projected onto two fixed answer-class
    vectors, so downstream consumers exercise the exact wire contract without
    model weights.
    """

    NUM_FEATURES = 8
    GLOBAL_DIM = 64

    def __init__(self, model_id: str = "patchstat-v1", dim: int = 3584):
        self.model_id = model_id
        self.dim = dim
        seed = int.from_bytes(hashlib.sha256(model_id.encode()).digest()[:4], "little")
        rng = np.random.default_rng(seed)
        self._token_proj = rng.standard_normal((self.NUM_FEATURES, dim)).astype(np.float64)
        self._global_proj = rng.standard_normal((self.NUM_FEATURES, self.GLOBAL_DIM))
        # Answer-class directions over the joint summary (appearance,
        # geometry, prompt bias): "1" rewards agreement, "0" mirrors it.
        self._class_one = np.array([2.5, 1.0, 1.0])
        self._class_zero = -self._class_one

    # --- extraction ---------------------------------------------------------

    def extract(self, pixels: np.ndarray, resolution: int) -> tuple[TokenPayload, np.ndarray]:
        image = PilImage.fromarray(pixels, mode="RGB")
        out_w, out_h = snap_resize(image.width, image.height, resolution)
        resized = np.asarray(
            image.resize((out_w, out_h), resample=PilImage.BILINEAR), dtype=np.float64
        )
        rows, cols = out_h // EFFECTIVE_PATCH, out_w // EFFECTIVE_PATCH
        cells = resized.reshape(rows, EFFECTIVE_PATCH, cols, EFFECTIVE_PATCH, 3)
        feats = np.empty((rows, cols, self.NUM_FEATURES))
        feats[..., 0:3] = cells.mean(axis=(1, 3))
        feats[..., 3:6] = cells.std(axis=(1, 3))
        lum = cells.mean(axis=4)
        feats[..., 6] = np.abs(np.diff(lum, axis=1)).mean(axis=(1, 3))
        feats[..., 7] = np.abs(np.diff(lum, axis=3)).mean(axis=(1, 3))
        feats /= 255.0

        tokens = (feats.reshape(rows * cols, self.NUM_FEATURES) @ self._token_proj).astype(
            np.float32
        )
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        positions = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int32)

        pooled = feats.mean(axis=(0, 1)) @ self._global_proj
        norm = np.linalg.norm(pooled)
        global_desc = (pooled / norm if norm > 0 else pooled).astype(np.float32)
        return TokenPayload(tokens, positions, rows, cols), global_desc

    # --- scoring ------------------------------------------------------------

    @staticmethod
    def _normalize_rows(x: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    @staticmethod
    def _unit_positions(payload: TokenPayload, positions: np.ndarray) -> np.ndarray:
        denom = np.array([max(payload.rows - 1, 1), max(payload.cols - 1, 1)], dtype=np.float64)
        return positions.astype(np.float64) / denom

    @staticmethod
    def _shuffled(positions: np.ndarray) -> np.ndarray:
        perm = np.random.default_rng(20_240_501).permutation(len(positions))
        return positions[perm]

    def score(
        self,
        query: TokenPayload,
        candidate: TokenPayload,
        prompt_text: str,
        shuffle_positions: str = "off",
    ) -> tuple[float, float]:
        """Return (logit_zero, logit_one) for one pair; no randomness."""
        if query.tokens.shape[1] != self.dim or candidate.tokens.shape[1] != self.dim:
            raise ValueError("token dimension does not match the model")
        q_pos = query.positions
        c_pos = candidate.positions
        if shuffle_positions in ("query", "both"):
            q_pos = self._shuffled(q_pos)
        if shuffle_positions == "both":
            c_pos = self._shuffled(c_pos)

        q = self._normalize_rows(query.tokens.astype(np.float64))
        c = self._normalize_rows(candidate.tokens.astype(np.float64))
        cosines = q @ c.T
        best = np.argmax(cosines, axis=1)
        appearance = float(cosines[np.arange(len(q)), best].mean())

        qp = self._unit_positions(query, q_pos)
        cp = self._unit_positions(candidate, c_pos)
        gaps = np.sum((qp - cp[best]) ** 2, axis=1)
        geometry = 2.0 * float(np.exp(-4.0 * gaps).mean()) - 1.0

        digest = hashlib.sha256(prompt_text.encode()).digest()
        prompt_bias = (digest[0] / 255.0 - 0.5) * 0.5

        summary = np.array([appearance, geometry, prompt_bias])
        return float(summary @ self._class_zero), float(summary @ self._class_one)


def make_backend(model: str, device: str = "cpu"):
    """Resolve a config model string to a backend instance."""
    if model.startswith("qwen:"):
        from .qwen_backend import QwenVlBackend

        return QwenVlBackend(model[len("qwen:") :], device=device)
    return PatchStatBackend(model_id=model)
