"""Dense soft matching of source keypoints into a destination scan.

For every source keypoint the sampled descriptor is compared by cosine similarity
with every pixel of the per-pixel-normalised destination descriptor map. A
temperature-weighted softmax over the whole map turns that cosine map into a
soft-argmax destination location, and the match weight multiplies the descriptor
agreement at both ends with the two keypoint scores:

    w = 0.5 * (d_s . d_d + 1) * s_s * s_d

Sources are processed in row blocks and the destination pixels in column tiles, so
the (sources x pixels) cosine matrix is never held whole. Unit vectors bound every
logit by the temperature, which is used as a fixed softmax shift folded into the
similarity product; rows whose mass underflows under that shift are redone with
the exact row maximum. The forward pass runs in float32 or float64
(`precision`); the backward pass always recomputes its blocks in float64.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from core.exceptions import ConfigurationError, DataError
from core.grids import (
    Grid2,
    bilinear_jacobian,
    bilinear_sample,
    bilinear_scatter,
    l2_normalize,
    l2_normalize_backward,
    pix2world,
    pixel_coordinates,
    softmax,
    softmax_backward,
)

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

# destination pixels per tile; one float32 tile of 64 rows stays within L2
COLUMN_BLOCK = 4096


def _dtype(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigurationError(
            f"matcher.precision must be one of {', '.join(PRECISIONS)}, got {precision!r}"
        ) from None


@dataclass(frozen=True)
class MatchOptions:
    temperature: float = 50.0
    block_size: int = 64
    precision: str = "float32"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"matcher.temperature must be positive, got {self.temperature}")
        if self.block_size < 1:
            raise ConfigurationError(f"matcher.block_size must be >= 1, got {self.block_size}")
        _dtype(self.precision)

    @classmethod
    def from_dict(cls, values):
        return cls(
            temperature=float(values["temperature"]),
            block_size=int(values["block_size"]),
            precision=str(values.get("precision", "float32")),
        )


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Paired world points with their match weights."""

    src_points: np.ndarray
    dst_points: np.ndarray
    weights: np.ndarray
    temperature: float

    def __post_init__(self):
        src = np.asarray(self.src_points, dtype=np.float64).reshape(-1, 2)
        dst = np.asarray(self.dst_points, dtype=np.float64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(src) == len(dst) == len(weights)):
            raise DataError(f"MatchSet lengths differ: {len(src)}, {len(dst)}, {len(weights)}")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
            raise DataError("MatchSet has non-finite coordinates")
        if np.any(weights < 0.0) or np.any(weights > 1.0):
            raise DataError("MatchSet weights must lie in [0, 1]")
        object.__setattr__(self, "src_points", src)
        object.__setattr__(self, "dst_points", dst)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.weights)

    @property
    def total_weight(self):
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class MatchResult:
    dst_locations: np.ndarray  # (N, 2) pixels in the destination grid
    weights: np.ndarray  # (N,)
    src_descriptors: np.ndarray
    dst_descriptors: np.ndarray
    src_scores: np.ndarray
    dst_scores: np.ndarray
    src_degenerate: np.ndarray

    def to_match_set(self, src_locations, src_grid, dst_grid, temperature):
        return MatchSet(
            src_points=pix2world(src_locations, src_grid),
            dst_points=pix2world(self.dst_locations, dst_grid),
            weights=self.weights,
            temperature=temperature,
        )


@dataclass(frozen=True, eq=False)
class MatchGradients:
    src_locations: np.ndarray
    src_descriptor_map: np.ndarray
    dst_descriptor_map: np.ndarray
    src_score_map: np.ndarray
    dst_score_map: np.ndarray


def _hwc(data):
    if isinstance(data, Grid2):
        data = data.data
    data = np.asarray(data, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _hw(data):
    if isinstance(data, Grid2):
        return data.plane
    return np.asarray(data, dtype=np.float64)


def temperature_softmax(C, temperature):
    """Softmax of temperature * C over the last axis."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    return softmax(temperature * np.asarray(C, dtype=np.float64), axis=-1)


def softmax_temperature_sweep(C, temperatures, coordinates=None):
    """Softmax mass and soft-argmax of a cosine map for each temperature.

    `C` is an (H, W) map or a flat vector; `coordinates` defaults to the pixel
    coordinates of an (H, W) map. Returns a list of (temperature, S, soft_argmax).
    """
    C = np.asarray(C, dtype=np.float64)
    if coordinates is None:
        if C.ndim != 2:
            raise DataError("coordinates are required for a flat cosine vector")
        coordinates = pixel_coordinates(*C.shape)
    flat = C.reshape(-1)
    sweep = []
    for temperature in temperatures:
        S = temperature_softmax(flat, temperature)
        sweep.append((float(temperature), S.reshape(C.shape), S @ coordinates))
    return sweep


class _DestinationMap:
    """Per-pixel unit descriptors and coordinates of a destination map."""

    def __init__(self, descriptor_map):
        self.data = _hwc(descriptor_map)
        height, width, channels = self.data.shape
        self.flat = self.data.reshape(height * width, channels)
        self.unit = l2_normalize(self.flat, axis=1).unit
        self.coordinates = pixel_coordinates(height, width)

    def kernel_operands(self, dtype):
        """[unit | 1] and [x | y | 1] in `dtype`, built once per call."""
        augmented = np.empty((len(self.unit), self.unit.shape[1] + 1), dtype=dtype)
        augmented[:, :-1] = self.unit
        augmented[:, -1] = 1.0
        coordinates = np.empty((len(self.unit), 3), dtype=dtype)
        coordinates[:, :2] = self.coordinates
        coordinates[:, 2] = 1.0
        return augmented, coordinates


def _soft_argmax(src_descriptors, dst, temperature, block_size, dtype):
    """Softmax-weighted destination pixel of every unit source descriptor.

    Logits T * cos lie in [-T, T], so exp(T * cos - T) never overflows. The shift is
    carried as an extra column of the product. A row whose total mass falls below
    `guard` lost its significant terms to underflow and is recomputed exactly.
    """
    augmented, coordinates = dst.kernel_operands(dtype)
    guard = float(np.finfo(dtype).tiny) ** 0.7
    n, pixels = len(src_descriptors), len(augmented)
    rows, columns = min(block_size, n), min(COLUMN_BLOCK, pixels)
    logits = np.empty((rows, columns), dtype=dtype)
    queries = np.empty((rows, augmented.shape[1]), dtype=dtype)
    moments = np.empty((rows, 3), dtype=np.float64)
    dst_locations = np.empty((n, 2))

    for start in range(0, n, block_size):
        m = min(block_size, n - start)
        query = queries[:m]
        query[:, :-1] = temperature * src_descriptors[start:start + m]
        query[:, -1] = -temperature
        acc = moments[:m]
        acc.fill(0.0)
        for first in range(0, pixels, columns):
            last = min(first + columns, pixels)
            tile = logits[:m, : last - first]
            np.matmul(query, augmented[first:last].T, out=tile)
            np.exp(tile, out=tile)
            acc += tile @ coordinates[first:last]
        dst_locations[start:start + m] = acc[:, :2] / np.maximum(acc[:, 2:], guard)
        for row in np.flatnonzero(acc[:, 2] < guard):
            S = temperature_softmax(src_descriptors[start + row] @ dst.unit.T, temperature)
            dst_locations[start + row] = S @ dst.coordinates
    return dst_locations


def _check_inputs(src_locations, src_map, dst_map, temperature):
    if src_map.shape[2] != dst_map.shape[2]:
        raise DataError(f"descriptor channel counts differ: {src_map.shape[2]} vs {dst_map.shape[2]}")
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if src_locations.ndim != 2 or src_locations.shape[1] != 2:
        raise DataError(f"source locations must be (N, 2), got {src_locations.shape}")


def match_points(
    src_locations,
    src_descriptor_map,
    dst_descriptor_map,
    src_score_map,
    dst_score_map,
    temperature,
    block_size=64,
    precision="float64",
):
    """Soft-match every source keypoint into the destination scan.

    Score maps are sigmoid outputs in [0, 1]. A source whose sampled descriptor is
    degenerate gets weight 0. `precision` selects the dtype of the dense cosine and
    softmax work; descriptors, scores and weights are always sampled in float64.
    """
    dtype = _dtype(precision)
    src_locations = np.atleast_2d(np.asarray(src_locations, dtype=np.float64))
    src_map = _hwc(src_descriptor_map)
    dst = _DestinationMap(dst_descriptor_map)
    _check_inputs(src_locations, src_map, dst.data, temperature)
    if block_size < 1:
        raise ConfigurationError(f"block_size must be >= 1, got {block_size}")
    src_scores_map = _hw(src_score_map)
    dst_scores_map = _hw(dst_score_map)

    src_descriptors, src_degenerate = l2_normalize(bilinear_sample(src_map, src_locations).values, axis=1)
    dst_locations = _soft_argmax(src_descriptors, dst, temperature, block_size, dtype)

    dst_descriptors = l2_normalize(bilinear_sample(dst.data, dst_locations).values, axis=1).unit
    src_scores = bilinear_sample(src_scores_map, src_locations).values[:, 0]
    dst_scores = bilinear_sample(dst_scores_map, dst_locations).values[:, 0]
    agreement = 0.5 * (np.sum(src_descriptors * dst_descriptors, axis=1) + 1.0)
    weights = np.where(src_degenerate, 0.0, agreement * src_scores * dst_scores)
    if src_degenerate.any():
        logger.debug(f"{int(src_degenerate.sum())} source keypoints have degenerate descriptors")
    return MatchResult(
        dst_locations=dst_locations,
        weights=np.clip(weights, 0.0, 1.0),
        src_descriptors=src_descriptors,
        dst_descriptors=dst_descriptors,
        src_scores=src_scores,
        dst_scores=dst_scores,
        src_degenerate=src_degenerate,
    )


def match_points_backward(
    src_locations,
    src_descriptor_map,
    dst_descriptor_map,
    src_score_map,
    dst_score_map,
    temperature,
    grad_dst_locations,
    grad_weights,
    block_size=64,
):
    """Reverse-mode gradient of (dst_locations, weights) with respect to every input."""
    src_locations = np.atleast_2d(np.asarray(src_locations, dtype=np.float64))
    src_map = _hwc(src_descriptor_map)
    dst = _DestinationMap(dst_descriptor_map)
    _check_inputs(src_locations, src_map, dst.data, temperature)
    src_scores_map = _hw(src_score_map)
    dst_scores_map = _hw(dst_score_map)
    forward = match_points(
        src_locations, src_map, dst.data, src_scores_map, dst_scores_map, temperature, block_size
    )
    p_d = forward.dst_locations
    d_s, d_d = forward.src_descriptors, forward.dst_descriptors
    s_s, s_d = forward.src_scores, forward.dst_scores

    g_w = np.where(forward.src_degenerate, 0.0, np.asarray(grad_weights, dtype=np.float64))
    agreement = 0.5 * (np.sum(d_s * d_d, axis=1) + 1.0)
    g_agreement = g_w * s_s * s_d
    g_src_scores = g_w * agreement * s_d
    g_dst_scores = g_w * agreement * s_s
    g_cos = 0.5 * g_agreement
    g_d_s = g_cos[:, None] * d_d
    g_d_d = g_cos[:, None] * d_s

    # destination side: score sample and descriptor sample at p_d
    g_dst_score_map = bilinear_scatter(dst_scores_map.shape, p_d, g_dst_scores[:, None])
    g_p_d = np.array(grad_dst_locations, dtype=np.float64) + g_dst_scores[:, None] * bilinear_jacobian(
        dst_scores_map, p_d
    )[:, 0, :]
    raw_d = bilinear_sample(dst.data, p_d).values
    g_raw_d = l2_normalize_backward(raw_d, g_d_d, axis=1)
    g_dst_map = bilinear_scatter(dst.data.shape, p_d, g_raw_d)
    g_p_d += np.einsum("nc,ncd->nd", g_raw_d, bilinear_jacobian(dst.data, p_d))

    # soft-argmax through the dense cosine map, block by block
    g_unit = np.zeros_like(dst.unit)
    for start in range(0, len(src_locations), block_size):
        block = slice(start, start + block_size)
        S = temperature_softmax(d_s[block] @ dst.unit.T, temperature)
        g_S = g_p_d[block] @ dst.coordinates.T
        g_C = temperature * softmax_backward(S, g_S, axis=1)
        g_d_s[block] += g_C @ dst.unit
        g_unit += g_C.T @ d_s[block]
    g_dst_map += l2_normalize_backward(dst.flat, g_unit, axis=1).reshape(dst.data.shape)

    # source side
    raw_s = bilinear_sample(src_map, src_locations).values
    g_raw_s = l2_normalize_backward(raw_s, g_d_s, axis=1)
    g_src_map = bilinear_scatter(src_map.shape, src_locations, g_raw_s)
    g_src_locations = np.einsum("nc,ncd->nd", g_raw_s, bilinear_jacobian(src_map, src_locations))
    g_src_score_map = bilinear_scatter(src_scores_map.shape, src_locations, g_src_scores[:, None])
    g_src_locations += g_src_scores[:, None] * bilinear_jacobian(src_scores_map, src_locations)[:, 0, :]

    return MatchGradients(
        src_locations=g_src_locations,
        src_descriptor_map=g_src_map,
        dst_descriptor_map=g_dst_map,
        src_score_map=g_src_score_map,
        dst_score_map=g_dst_score_map,
    )


def benchmark_match_points(
    keypoints=400, size=256, channels=16, temperature=50.0, block_size=64, repeats=5, seed=0, precision="float32"
):
    """Wall-clock timings (seconds) of match_points on random inputs."""
    rng = np.random.default_rng(seed)
    src_map = rng.normal(size=(size, size, channels))
    dst_map = rng.normal(size=(size, size, channels))
    scores = rng.uniform(size=(size, size))
    locations = rng.uniform(0, size - 1, (keypoints, 2))
    timings = []
    for _ in range(repeats):
        started = time.perf_counter()
        match_points(locations, src_map, dst_map, scores, scores, temperature, block_size, precision)
        timings.append(time.perf_counter() - started)
    timings = np.array(timings)
    logger.info(
        f"match_points benchmark: {keypoints} keypoints, {size}x{size}x{channels} in {precision}, "
        f"best {timings.min() * 1e3:.1f} ms, median {np.median(timings) * 1e3:.1f} ms"
    )
    return {"best": float(timings.min()), "median": float(np.median(timings)), "timings": timings.tolist()}
