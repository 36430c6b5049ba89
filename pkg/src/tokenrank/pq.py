"""Product quantization of token embeddings.

A D-dimensional token is split into D/d contiguous d-dimensional subspaces,
each quantized against its own codebook of K centroids (K <= 256 so a code is
one byte). Compressed tokens are reconstructed by concatenating the selected
centroids.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import errors
from .core import TokenGrid
from .kmeans import kmeans

CODEBOOK_MAGIC = b"PQCB"
CODEBOOK_VERSION = 1
DEFAULT_K = 256


@dataclass(frozen=True)
class PqCodebooks:
    """Per-subspace centroid tables: centroids has shape (D/d, K, d)."""

    d: int
    k: int
    centroids: np.ndarray
    trained_on: int

    def __post_init__(self):
        if self.centroids.ndim != 3 or self.centroids.shape[1] != self.k:
            raise errors.DimensionMismatch(
                f"centroids shape {self.centroids.shape} inconsistent with K={self.k}"
            )
        if self.centroids.shape[2] != self.d:
            raise errors.DimensionMismatch(
                f"centroids shape {self.centroids.shape} inconsistent with d={self.d}"
            )
        if not 1 <= self.k <= 256:
            raise errors.OutOfRange(f"K={self.k} outside [1, 256]")
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def num_subspaces(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.num_subspaces * self.d


@dataclass(frozen=True)
class PqCodes:
    """Centroid indices per token: codes has shape (M, D/d), dtype uint8."""

    codes: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if c.ndim != 2:
            raise errors.DimensionMismatch(f"codes must be 2-D, got shape {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "codes", c)

    @property
    def num_tokens(self) -> int:
        return self.codes.shape[0]

    def nbytes(self) -> int:
        return self.codes.size  # one byte per subspace index


def train_codebooks(
    vectors: np.ndarray, d: int, k: int = DEFAULT_K, seed: int = 0, jobs: int = 1
) -> PqCodebooks:
    """Run an independent k-means per subspace over the training vectors.

    Subspace s is seeded with seed + s, so results do not depend on whether
    subspaces are trained serially or in parallel.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise errors.DimensionMismatch("training vectors must be (N, D)")
    n, dim = vectors.shape
    if dim % d != 0:
        raise errors.IndivisibleDimension(f"d={d} does not divide D={dim}")
    if not 1 <= k <= 256:
        raise errors.OutOfRange(f"K={k} outside [1, 256]")
    if n < k:
        raise errors.TooFewVectors(f"need at least K={k} vectors, got {n}")
    num_sub = dim // d

    def train_one(s: int) -> np.ndarray:
        sub = vectors[:, s * d : (s + 1) * d]
        centroids, _ = kmeans(sub, k, seed=seed + s)
        return centroids

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            tables = list(pool.map(train_one, range(num_sub)))
    else:
        tables = [train_one(s) for s in range(num_sub)]
    return PqCodebooks(d=d, k=k, centroids=np.stack(tables), trained_on=n)


def encode(grid: TokenGrid, cb: PqCodebooks) -> PqCodes:
    """Map each token to its nearest centroid index in every subspace.

    Ties break toward the smaller index (argmin order).
    """
    if grid.dim != cb.dim:
        raise errors.DimensionMismatch(f"grid D={grid.dim} does not match codebooks D={cb.dim}")
    tokens = grid.tokens.astype(np.float64)
    m = grid.num_tokens
    codes = np.empty((m, cb.num_subspaces), dtype=np.uint8)
    for s in range(cb.num_subspaces):
        sub = tokens[:, s * cb.d : (s + 1) * cb.d]
        cents = cb.centroids[s].astype(np.float64)
        d2 = (
            np.einsum("ij,ij->i", sub, sub)[:, None]
            + np.einsum("ij,ij->i", cents, cents)[None, :]
            - 2.0 * sub @ cents.T
        )
        codes[:, s] = np.argmin(d2, axis=1)
    return PqCodes(codes)


def reconstruct(codes: PqCodes, cb: PqCodebooks) -> np.ndarray:
    """Concatenate the selected centroids back into (M, D) float32 tokens."""
    if codes.codes.shape[1] != cb.num_subspaces:
        raise errors.DimensionMismatch(
            f"codes have {codes.codes.shape[1]} subspaces, codebooks {cb.num_subspaces}"
        )
    if codes.codes.size and codes.codes.max() >= cb.k:
        raise errors.CodeOutOfRange(f"code >= K={cb.k}")
    out = np.empty((codes.num_tokens, cb.dim), dtype=np.float32)
    for s in range(cb.num_subspaces):
        out[:, s * cb.d : (s + 1) * cb.d] = cb.centroids[s][codes.codes[:, s]]
    return out


def mean_reconstruction_error(vectors: np.ndarray, cb: PqCodebooks) -> float:
    """Mean squared Euclidean error of encode-then-reconstruct over rows."""
    vectors = np.asarray(vectors, dtype=np.float32)
    from .core import dense_grid_positions  # local import to avoid cycle at import time

    n = vectors.shape[0]
    grid = TokenGrid(vectors, dense_grid_positions(n, 1), n, 1)
    approx = reconstruct(encode(grid, cb), cb)
    diff = vectors.astype(np.float64) - approx.astype(np.float64)
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


def save_codebooks(path, cb: PqCodebooks) -> None:
    """Write the binary codebook file (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<HIIIQ", CODEBOOK_VERSION, cb.dim, cb.d, cb.k, cb.trained_on))
        fh.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())


def load_codebooks(path) -> PqCodebooks:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CODEBOOK_MAGIC:
            raise errors.BadMagic(f"{path}: not a codebook file")
        header = fh.read(struct.calcsize("<HIIIQ"))
        if len(header) != struct.calcsize("<HIIIQ"):
            raise errors.Corrupt(f"{path}: truncated header")
        version, dim, d, k, trained_on = struct.unpack("<HIIIQ", header)
        if version != CODEBOOK_VERSION:
            raise errors.UnsupportedVersion(f"{path}: version {version}")
        if d == 0 or dim % d != 0:
            raise errors.Corrupt(f"{path}: inconsistent dims D={dim}, d={d}")
        num_sub = dim // d
        payload = fh.read(num_sub * k * d * 4)
        if len(payload) != num_sub * k * d * 4:
            raise errors.Corrupt(f"{path}: truncated centroids")
        centroids = np.frombuffer(payload, dtype="<f4").reshape(num_sub, k, d)
    return PqCodebooks(d=d, k=k, centroids=centroids.copy(), trained_on=trained_on)
