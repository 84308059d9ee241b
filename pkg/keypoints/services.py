"""Keypoint extraction from dense head outputs.

Each square cell of the location-logit map yields one sub-pixel keypoint (spatial
softmax followed by the expected pixel coordinate). Scores come from the sigmoid of
the score logits and descriptors from the descriptor map, both sampled bilinearly
at the keypoint locations. Every forward function has a matching *_backward.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import ConfigurationError, DataError
from core.grids import (
    Grid2,
    bilinear_jacobian,
    bilinear_sample,
    bilinear_scatter,
    l2_normalize,
    l2_normalize_backward,
    sigmoid,
    softmax,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KeypointOptions:
    keypoint_count: Optional[int] = None
    use_location_head: bool = True
    use_score_head: bool = True

    @classmethod
    def from_dict(cls, values):
        return cls(
            keypoint_count=None if values["keypoint_count"] is None else int(values["keypoint_count"]),
            use_location_head=bool(values["use_location_head"]),
            use_score_head=bool(values["use_score_head"]),
        )


@dataclass(frozen=True, eq=False)
class KeypointHeadOutput:
    location_logits: Grid2
    score_logits: Grid2
    descriptor_map: Grid2

    def __post_init__(self):
        shapes = {g.data.shape[:2] for g in (self.location_logits, self.score_logits, self.descriptor_map)}
        if len(shapes) != 1:
            raise DataError(f"head outputs disagree on spatial size: {sorted(shapes)}")
        if self.location_logits.channels != 1 or self.score_logits.channels != 1:
            raise DataError("location and score logits must be single-channel")

    @property
    def score_map(self):
        return sigmoid(self.score_logits.plane)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    locations: np.ndarray  # (N, 2) pixels
    scores: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, C) unit rows, zero where degenerate
    degenerate: np.ndarray  # (N,)

    def __len__(self):
        return len(self.locations)


@dataclass(frozen=True)
class CellGrid:
    cell_size: int
    rows: int
    cols: int

    @property
    def count(self):
        return self.rows * self.cols

    def cell_of(self, locations):
        """Cell index (row-major) containing each location."""
        locations = np.asarray(locations)
        col = np.clip((locations[:, 0] // self.cell_size).astype(int), 0, self.cols - 1)
        row = np.clip((locations[:, 1] // self.cell_size).astype(int), 0, self.rows - 1)
        return row * self.cols + col

    def centres(self):
        offset = (self.cell_size - 1) / 2.0
        rows, cols = np.mgrid[0 : self.rows, 0 : self.cols]
        return np.stack(
            [cols.ravel() * self.cell_size + offset, rows.ravel() * self.cell_size + offset], axis=1
        ).astype(np.float64)


def valid_keypoint_counts(width, height):
    g = int(np.gcd(width, height))
    sizes = [s for s in range(1, g + 1) if g % s == 0]
    return sorted({(width // s) * (height // s) for s in sizes})


def cell_partition(width, height, target_count):
    """Square cells of equal size tiling the grid into exactly target_count cells."""
    if target_count < 1:
        raise ConfigurationError(f"keypoint count must be >= 1, got {target_count}")
    g = int(np.gcd(width, height))
    for size in range(1, g + 1):
        if g % size == 0 and (width // size) * (height // size) == target_count:
            return CellGrid(cell_size=size, rows=height // size, cols=width // size)
    raise ConfigurationError(
        f"no square cell size tiles a {width}x{height} grid into {target_count} cells; "
        f"valid counts are {valid_keypoint_counts(width, height)}"
    )


def default_keypoint_count(width, height, reference_area=160 * 160, reference_count=400):
    """Closest valid count to a density of 400 keypoints per 160x160 pixels (one per 8x8)."""
    wanted = reference_count * (width * height) / reference_area
    return min(valid_keypoint_counts(width, height), key=lambda n: (abs(n - wanted), n))


def _cell_view(plane, cells):
    s = cells.cell_size
    return plane.reshape(cells.rows, s, cells.cols, s).transpose(0, 2, 1, 3).reshape(cells.count, s * s)


def _cell_unview(values, cells):
    s = cells.cell_size
    return values.reshape(cells.rows, cells.cols, s, s).transpose(0, 2, 1, 3).reshape(cells.rows * s, cells.cols * s)


def _cell_pixel_coordinates(cells):
    s = cells.cell_size
    dy, dx = np.mgrid[0:s, 0:s]
    local = np.stack([dx.ravel(), dy.ravel()], axis=1).astype(np.float64)  # (s*s, 2)
    return cells.centres()[:, None, :] - (s - 1) / 2.0 + local[None, :, :]  # (N, s*s, 2)


def _plane(grid):
    return grid.plane if isinstance(grid, Grid2) else np.asarray(grid, dtype=np.float64)


def soft_locations(location_logits, cells):
    """Expected pixel coordinate under the per-cell spatial softmax."""
    plane = _plane(location_logits)
    probabilities = softmax(_cell_view(plane, cells), axis=1)
    return np.einsum("nk,nkd->nd", probabilities, _cell_pixel_coordinates(cells))


def soft_locations_backward(location_logits, cells, grad_locations):
    plane = _plane(location_logits)
    probabilities = softmax(_cell_view(plane, cells), axis=1)
    coords = _cell_pixel_coordinates(cells)
    mean = np.einsum("nk,nkd->nd", probabilities, coords)
    grad = probabilities * np.einsum("nkd,nd->nk", coords - mean[:, None, :], grad_locations)
    return _cell_unview(grad, cells)


def keypoint_scores(score_logits, locations):
    """sigmoid applied pixelwise, then bilinear-sampled at each location."""
    return bilinear_sample(sigmoid(_plane(score_logits)), locations).values[:, 0]


def keypoint_scores_backward(score_logits, locations, grad_scores):
    """Gradients with respect to the score logits and to the locations."""
    plane = _plane(score_logits)
    prob = sigmoid(plane)
    grad_prob = bilinear_scatter(plane.shape, locations, np.asarray(grad_scores)[:, None])
    grad_locations = bilinear_jacobian(prob, locations)[:, 0, :] * np.asarray(grad_scores)[:, None]
    return grad_prob * prob * (1.0 - prob), grad_locations


def sample_descriptors(descriptor_map, locations):
    """Bilinear sample then l2-normalise each keypoint descriptor."""
    data = descriptor_map.data if isinstance(descriptor_map, Grid2) else descriptor_map
    raw = bilinear_sample(data, locations).values
    return l2_normalize(raw, axis=1)


def sample_descriptors_backward(descriptor_map, locations, grad_descriptors):
    data = descriptor_map.data if isinstance(descriptor_map, Grid2) else np.asarray(descriptor_map)
    raw = bilinear_sample(data, locations).values
    grad_raw = l2_normalize_backward(raw, grad_descriptors, axis=1)
    grad_map = bilinear_scatter(data.shape, locations, grad_raw)
    grad_locations = np.einsum("nc,ncd->nd", grad_raw, bilinear_jacobian(data, locations))
    return grad_map, grad_locations


def keypoint_cells(head, options):
    width, height = head.location_logits.width, head.location_logits.height
    count = options.keypoint_count or default_keypoint_count(width, height)
    return cell_partition(width, height, count)


def extract_keypoints(head, options=KeypointOptions()):
    cells = keypoint_cells(head, options)
    if options.use_location_head:
        locations = soft_locations(head.location_logits, cells)
    else:
        locations = cells.centres()
    if options.use_score_head:
        scores = keypoint_scores(head.score_logits, locations)
    else:
        scores = np.ones(len(locations))
    descriptors, degenerate = sample_descriptors(head.descriptor_map, locations)
    if degenerate.any():
        logger.debug(f"{int(degenerate.sum())} of {len(locations)} keypoint descriptors are degenerate")
    return KeypointSet(locations, scores, descriptors, degenerate)
