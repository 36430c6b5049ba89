"""Controlled image perturbations and the similarity-vs-strength harness.

Ten transform kinds, each driven by a scalar factor. Every output gets a
20-pixel black border after the perturbation so that a factor at its identity
value still yields a non-trivial (padded) positive pair. Stochastic kinds are
deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image as PilImage
from scipy import ndimage

from . import errors, wire
from .core import TokenGrid

PAD = 20

KINDS = (
    "contrast",
    "brightness",
    "rotation",
    "downscale",
    "scale_bg",
    "blur",
    "tiling",
    "noise",
    "clutter",
    "occlusion",
)

# kind -> (lo, hi, integral factor, needs aux image)
FACTOR_RANGES: dict[str, tuple[float, float, bool, bool]] = {
    "contrast": (0.05, 20.0, False, False),
    "brightness": (0.05, 20.0, False, False),
    "rotation": (0.0, 180.0, False, False),
    "downscale": (0.05, 0.5, False, False),
    "scale_bg": (0.0, 1.0, False, True),
    # sigma 0 is the degenerate delta kernel; grids span [1, 15].
    "blur": (0.0, 15.0, False, False),
    "tiling": (1.0, 6.0, True, True),
    "noise": (0.0, 1.0, False, False),
    "clutter": (1.0, 28.0, True, True),
    "occlusion": (0.0, 1.0, False, False),
}


class Image:
    """An RGB raster: pixels is (H, W, 3) uint8, frozen after construction."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or min(pixels.shape[:2]) < 1:
            raise errors.DimensionMismatch(f"pixels must be (H, W, 3), got {pixels.shape}")
        pixels.flags.writeable = False
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


def load_image(path) -> Image:
    try:
        with PilImage.open(path) as img:
            return Image(np.asarray(img.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise errors.IoFailure(f"cannot read image {path}: {exc}") from exc


def save_image(path, img: Image) -> None:
    PilImage.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    factor: float
    aux_image: Image | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FACTOR_RANGES:
            raise errors.OutOfRange(f"unknown transform kind {self.kind!r}")
        lo, hi, integral, _ = FACTOR_RANGES[self.kind]
        if not lo <= self.factor <= hi:
            raise errors.FactorOutOfRange(
                f"{self.kind} factor {self.factor} outside [{lo}, {hi}]"
            )
        if integral and abs(self.factor - round(self.factor)) > 1e-9:
            raise errors.FactorOutOfRange(f"{self.kind} factor must be an integer")


def _pad(content: np.ndarray) -> np.ndarray:
    h, w = content.shape[:2]
    out = np.zeros((h + 2 * PAD, w + 2 * PAD, 3), dtype=np.uint8)
    out[PAD : PAD + h, PAD : PAD + w] = content
    return out


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)


def _resize_nn(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return pixels[rows][:, cols]


def _contrast(px: np.ndarray, factor: float) -> np.ndarray:
    x = px.astype(np.float64)
    mean = x.mean()
    return _quantize(mean + (x - mean) * factor)


def _brightness(px: np.ndarray, factor: float) -> np.ndarray:
    # Multiplicative luminance change, consistent with the geometric factor grid.
    return _quantize(px.astype(np.float64) * factor)


def _rotation(px: np.ndarray, degrees: float) -> np.ndarray:
    # Nearest-neighbor about the image center, canvas expanded to fit.
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    h, w = px.shape[:2]
    out_w = int(round(w * abs(c) + h * abs(s)))
    out_h = int(round(w * abs(s) + h * abs(c)))
    cy_in, cx_in = (h - 1) / 2.0, (w - 1) / 2.0
    cy_out, cx_out = (out_h - 1) / 2.0, (out_w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(out_w), np.arange(out_h))
    dx = jj - cx_out
    dy = ii - cy_out
    src_x = np.rint(c * dx + s * dy + cx_in).astype(np.int64)
    src_y = np.rint(-s * dx + c * dy + cy_in).astype(np.int64)
    valid = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.zeros((out_h, out_w, 3), dtype=np.uint8)
    out[valid] = px[src_y[valid], src_x[valid]]
    return out


def _downscale(px: np.ndarray, scale: float) -> np.ndarray:
    h, w = px.shape[:2]
    small = _resize_nn(px, max(1, round(h * scale)), max(1, round(w * scale)))
    canvas = np.zeros((h, w, 3), dtype=np.uint8)
    canvas[: small.shape[0], : small.shape[1]] = small
    return canvas


def _scale_bg(px: np.ndarray, ratio: float, aux: np.ndarray) -> np.ndarray:
    h, w = px.shape[:2]
    canvas = _resize_nn(aux, h, w).copy()
    scale = 1.0 - ratio
    sh, sw = round(h * scale), round(w * scale)
    if sh >= 1 and sw >= 1:
        content = _resize_nn(px, sh, sw)
        top, left = (h - sh) // 2, (w - sw) // 2
        canvas[top : top + sh, left : left + sw] = content
    return canvas


def _blur(px: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return px.copy()
    blurred = ndimage.gaussian_filter(
        px.astype(np.float64), sigma=(sigma, sigma, 0), mode="nearest"
    )
    return _quantize(blurred)


def _patch_dims(h: int, w: int, area_fraction: float) -> tuple[int, int]:
    side = math.sqrt(area_fraction)
    return max(1, round(h * side)), max(1, round(w * side))


def _random_patch(aux: np.ndarray, ph: int, pw: int, rng: np.random.Generator) -> np.ndarray:
    top = int(rng.integers(0, aux.shape[0] - ph + 1))
    left = int(rng.integers(0, aux.shape[1] - pw + 1))
    return aux[top : top + ph, left : left + pw]


def _tiling(px: np.ndarray, count: int, aux: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = px.shape[:2]
    aux = _resize_nn(aux, h, w)
    ph, pw = _patch_dims(h, w, 1.0 / 6.0)
    ph, pw = min(ph, h), min(pw, w)
    out = px.copy()
    placed: list[tuple[int, int]] = []
    for _ in range(count):
        top = left = 0
        for _attempt in range(100):
            top = int(rng.integers(0, h - ph + 1))
            left = int(rng.integers(0, w - pw + 1))
            if all(
                top + ph <= t or t + ph <= top or left + pw <= l or l + pw <= left
                for t, l in placed
            ):
                break
        placed.append((top, left))
        out[top : top + ph, left : left + pw] = _random_patch(aux, ph, pw, rng)
    return out


def _noise(px: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, sigma * 255.0, size=px.shape)
    return _quantize(px.astype(np.float64) + noise)


def _clutter(px: np.ndarray, count: int, aux: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Content shrinks onto a replacement background, then distractor patches
    # raise the clutter density.
    h, w = px.shape[:2]
    canvas = _resize_nn(aux, h, w).copy()
    sh, sw = max(1, round(h * 0.5)), max(1, round(w * 0.5))
    content = _resize_nn(px, sh, sw)
    top, left = (h - sh) // 2, (w - sw) // 2
    canvas[top : top + sh, left : left + sw] = content
    ph, pw = _patch_dims(h, w, 1.0 / 36.0)
    ph, pw = min(ph, h), min(pw, w)
    for _ in range(count):
        t = int(rng.integers(0, h - ph + 1))
        l = int(rng.integers(0, w - pw + 1))
        canvas[t : t + ph, l : l + pw] = _random_patch(aux, ph, pw, rng)
    return canvas


def _occlusion(px: np.ndarray, coverage: float, rng: np.random.Generator) -> np.ndarray:
    h, w = px.shape[:2]
    if coverage <= 0:
        return px.copy()
    out = px.copy()
    if coverage >= 1.0:
        out[:] = 0
        return out
    target = int(math.ceil(coverage * h * w))
    radius = max(2, round(min(h, w) / 8))
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    mask = np.zeros((h, w), dtype=bool)
    covered = 0
    for _ in range(10_000):
        if covered >= target:
            break
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        mask |= (ii - cy) ** 2 + (jj - cx) ** 2 <= radius * radius
        covered = int(mask.sum())
    if covered < target:
        # Deterministic fallback for extreme coverage targets.
        flat = mask.ravel()
        remaining = np.flatnonzero(~flat)[: target - covered]
        flat[remaining] = True
        mask = flat.reshape(h, w)
    out[mask] = 0
    return out


def apply_transform(img: Image, spec: TransformSpec) -> Image:
    """Perturb the image per the spec, then add the 20px black border."""
    _, _, integral, needs_aux = FACTOR_RANGES[spec.kind]
    aux = None
    if needs_aux:
        if spec.aux_image is None:
            raise errors.MissingAuxImage(f"{spec.kind} requires aux_image")
        aux = spec.aux_image.pixels
    rng = np.random.default_rng(spec.seed)
    px = img.pixels
    factor = round(spec.factor) if integral else spec.factor
    if spec.kind == "contrast":
        content = _contrast(px, factor)
    elif spec.kind == "brightness":
        content = _brightness(px, factor)
    elif spec.kind == "rotation":
        content = _rotation(px, factor)
    elif spec.kind == "downscale":
        content = _downscale(px, factor)
    elif spec.kind == "scale_bg":
        content = _scale_bg(px, factor, aux)
    elif spec.kind == "blur":
        content = _blur(px, factor)
    elif spec.kind == "tiling":
        content = _tiling(px, factor, aux, rng)
    elif spec.kind == "noise":
        content = _noise(px, factor, rng)
    elif spec.kind == "clutter":
        content = _clutter(px, factor, aux, rng)
    else:
        content = _occlusion(px, factor, rng)
    return Image(_pad(content))


def factor_grid(kind: str, n: int) -> np.ndarray:
    """A monotone grid of n factors spanning the kind's full range.

    Multiplicative kinds (contrast, brightness) are spaced geometrically,
    everything else linearly; count-valued kinds are rounded to integers.
    """
    if kind not in FACTOR_RANGES:
        raise errors.OutOfRange(f"unknown transform kind {kind!r}")
    if n < 2:
        raise errors.OutOfRange(f"n={n} must be >= 2")
    lo, hi, integral, _ = FACTOR_RANGES[kind]
    if kind in ("contrast", "brightness"):
        grid = np.geomspace(lo, hi, n)
    elif kind == "blur":
        grid = np.linspace(1.0, hi, n)
    else:
        grid = np.linspace(lo, hi, n)
    if integral:
        grid = np.rint(grid)
        if len(np.unique(grid)) != n:
            raise errors.OutOfRange(
                f"{kind} admits only {int(hi - lo) + 1} integer factors; n={n} is too fine"
            )
    return grid


@dataclass(frozen=True)
class RobustnessCurve:
    kind: str
    n: int
    seed: int
    scorer_id: str
    points: tuple[tuple[float, float], ...]  # (factor, mean similarity)

    def to_csv(self) -> str:
        lines = [
            f"# kind={self.kind} n={self.n} seed={self.seed} scorer={self.scorer_id}",
            "factor,mean_similarity",
        ]
        lines += [f"{factor!r},{value!r}" for factor, value in self.points]
        return "\n".join(lines) + "\n"


def robustness_curve(
    scorer,
    extractor,
    queries,
    kind: str,
    n: int,
    seed: int = 0,
    aux_images=None,
    prompt_id: str = "object",
) -> RobustnessCurve:
    """Score each query against transformed versions of itself.

    For every factor on the grid, each query image is paired with its own
    transform; the reported value is the mean pairwise similarity across
    queries. When a kind needs an aux image and none are supplied, the other
    queries serve as aux material.
    """
    queries = list(queries)
    if not queries:
        raise errors.EmptyCorpus("no query images")
    needs_aux = FACTOR_RANGES.get(kind, (0, 0, False, False))[3]
    if needs_aux and aux_images is None:
        if len(queries) < 2:
            raise errors.MissingAuxImage(f"{kind} needs aux images or >= 2 queries")
        aux_images = [queries[(i + 1) % len(queries)] for i in range(len(queries))]
    query_grids = [extractor.extract(q) for q in queries]

    points = []
    for factor in factor_grid(kind, n):
        scores = []
        for qi, query in enumerate(queries):
            spec = TransformSpec(
                kind=kind,
                factor=float(factor),
                aux_image=aux_images[qi % len(aux_images)] if needs_aux else None,
                seed=seed + qi,
            )
            transformed = apply_transform(query, spec)
            cand = extractor.extract(transformed)
            scores.extend(scorer.score_batch(query_grids[qi], [cand], prompt_id))
        points.append((float(factor), float(np.mean(scores))))
    return RobustnessCurve(
        kind=kind,
        n=n,
        seed=seed,
        scorer_id=getattr(scorer, "scorer_id", scorer.__class__.__name__),
        points=tuple(points),
    )


def crossing_point(curve, baseline: float) -> float | None:
    """First factor where the curve drops below the baseline.

    Linearly interpolated between the bracketing grid points; the first factor
    itself when the curve starts below; None when it never crosses.
    """
    points = list(curve.points if isinstance(curve, RobustnessCurve) else curve)
    if not points:
        raise errors.EmptyScores("curve is empty")
    factors = [f for f, _ in points]
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise errors.OutOfRange("curve factors must be strictly increasing")
    for i, (factor, value) in enumerate(points):
        if value < baseline:
            if i == 0:
                return factor
            prev_factor, prev_value = points[i - 1]
            t = (prev_value - baseline) / (prev_value - value)
            return prev_factor + t * (factor - prev_factor)
    return None


class PatchStatExtractor:
    """Deterministic image-to-token extractor for offline runs.

    Splits the image into a fixed cell grid, summarizes each cell with simple
    channel statistics, and projects the summary to the target dimension with
    a seeded random matrix.
    """

    NUM_FEATURES = 8

    def __init__(self, grid_rows: int = 4, grid_cols: int = 4, dim: int = 64, seed: int = 0):
        self.grid_rows = grid_rows
        self.grid_cols = grid_cols
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((self.NUM_FEATURES, dim)).astype(np.float64)

    def extract(self, img: Image) -> TokenGrid:
        px = img.pixels.astype(np.float64)
        h, w = px.shape[:2]
        row_edges = np.linspace(0, h, self.grid_rows + 1).astype(int)
        col_edges = np.linspace(0, w, self.grid_cols + 1).astype(int)
        tokens = []
        positions = []
        for r in range(self.grid_rows):
            for c in range(self.grid_cols):
                cell = px[row_edges[r] : max(row_edges[r + 1], row_edges[r] + 1),
                          col_edges[c] : max(col_edges[c + 1], col_edges[c] + 1)]
                lum = cell.mean(axis=2)
                feats = np.array(
                    [
                        cell[..., 0].mean(),
                        cell[..., 1].mean(),
                        cell[..., 2].mean(),
                        cell[..., 0].std(),
                        cell[..., 1].std(),
                        cell[..., 2].std(),
                        np.abs(np.diff(lum, axis=0)).mean() if lum.shape[0] > 1 else 0.0,
                        np.abs(np.diff(lum, axis=1)).mean() if lum.shape[1] > 1 else 0.0,
                    ]
                ) / 255.0
                tokens.append(feats)
                positions.append((r, c))
        feats = np.asarray(tokens)
        # Center each feature over the cells so cosines between projected
        # tokens discriminate rather than cluster near 1.
        feats -= feats.mean(axis=0, keepdims=True)
        return TokenGrid(
            (feats @ self._proj).astype(np.float32),
            np.asarray(positions, dtype=np.int32),
            self.grid_rows,
            self.grid_cols,
        )


class RemoteExtractor:
    """Client for the token-extraction endpoint of the scoring service."""

    def __init__(self, endpoint: str, resolution: int = 560,
                 timeout_s: float = 120.0, retries: int = 2):
        self.endpoint = endpoint.rstrip("/")
        self.resolution = resolution
        self.timeout_s = timeout_s
        self.retries = retries

    def extract(self, img: Image) -> TokenGrid:
        import io

        buf = io.BytesIO()
        PilImage.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
        last_exc: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(
                    f"{self.endpoint}/v1/extract",
                    params={"resolution": self.resolution},
                    data=buf.getvalue(),
                    headers={"Content-Type": "application/octet-stream"},
                    timeout=self.timeout_s,
                )
            except requests.Timeout as exc:
                last_exc = errors.Timeout(f"extract timed out after {self.timeout_s}s")
                last_exc.__cause__ = exc
                continue
            except requests.RequestException as exc:
                last_exc = errors.ServiceError(0, f"cannot reach {self.endpoint}: {exc}")
                continue
            if resp.status_code != 200:
                err = errors.ServiceError(resp.status_code, resp.text)
                if 400 <= resp.status_code < 500:
                    raise err
                last_exc = err
                continue
            payload = resp.json()
            if payload.get("protocol") != wire.PROTOCOL_VERSION:
                raise errors.ProtocolMismatch(
                    f"service speaks protocol {payload.get('protocol')}"
                )
            return wire.payload_to_grid(payload, payload["d"])
        raise last_exc if last_exc is not None else errors.ServiceError(0, "no attempts made")
