"""Dense 2D grids, pixel/world conversion and differentiable sampling.

Pixel convention: a pixel coordinate is (x, y) = (column, row). Pixel (i, j) covers
[i, i+1) x [j, j+1) and its sample point is (i, j). World axes follow pixel axes
(+x pixel = +x world, +y pixel = +y world) and q = origin + resolution * p.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import DataError

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Grid2:
    """Row-major field of shape (height, width, channels) with spatial metadata."""

    data: np.ndarray
    resolution: float
    origin: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DataError(f"Grid2 data must be (H, W) or (H, W, C), got shape {data.shape}")
        if not self.resolution > 0:
            raise DataError(f"Grid2 resolution must be positive, got {self.resolution}")
        if not np.all(np.isfinite(data)):
            raise DataError("Grid2 data contains non-finite values")
        origin = np.array(self.origin, dtype=np.float64).reshape(2)
        data.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def centred(cls, data, resolution):
        """Grid whose centre sits on the world origin (the sensor)."""
        data = np.asarray(data)
        height, width = data.shape[:2]
        origin = -0.5 * np.array([width - 1, height - 1], dtype=np.float64) * resolution
        return cls(data, resolution, origin)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def plane(self):
        """The single channel as an (H, W) array."""
        if self.channels != 1:
            raise DataError(f"expected a single-channel grid, got {self.channels} channels")
        return self.data[:, :, 0]

    def with_data(self, data):
        return Grid2(data, self.resolution, self.origin)

    def pixel_coordinates(self):
        """(H*W, 2) array of (x, y) sample points in row-major order."""
        return pixel_coordinates(self.height, self.width)


def pixel_coordinates(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def pix2world(p, grid):
    return grid.origin + grid.resolution * np.asarray(p, dtype=np.float64)


def world2pix(q, grid):
    return (np.asarray(q, dtype=np.float64) - grid.origin) / grid.resolution


class BilinearSample(NamedTuple):
    values: np.ndarray  # (N, C)
    clamped: np.ndarray  # (N,) True where the point was moved onto the boundary


def _as_hwc(data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        return data[:, :, None]
    return data


def _corners(shape, points):
    height, width = shape[:2]
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = np.clip(points[:, 0], 0.0, width - 1)
    y = np.clip(points[:, 1], 0.0, height - 1)
    clamped = (x != points[:, 0]) | (y != points[:, 1])
    x0 = np.clip(np.floor(x), 0, max(width - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, max(height - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    return x0, x1, y0, y1, fx, fy, clamped, points


def bilinear_sample(data, points):
    """Bilinear blend of the four surrounding pixels, per channel.

    `data` is a Grid2 or an (H, W[, C]) array. Out-of-bounds points are clamped
    onto the boundary and flagged.
    """
    if isinstance(data, Grid2):
        data = data.data
    data = _as_hwc(data)
    x0, x1, y0, y1, fx, fy, clamped, _ = _corners(data.shape, points)
    fx = fx[:, None]
    fy = fy[:, None]
    values = (
        (1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x1])
        + fy * ((1 - fx) * data[y1, x0] + fx * data[y1, x1])
    )
    return BilinearSample(values, clamped)


def bilinear_jacobian(data, points):
    """d sample / d p as an (N, C, 2) array; zero along clamped axes."""
    if isinstance(data, Grid2):
        data = data.data
    data = _as_hwc(data)
    height, width = data.shape[:2]
    x0, x1, y0, y1, fx, fy, _, points = _corners(data.shape, points)
    fx = fx[:, None]
    fy = fy[:, None]
    v00, v01 = data[y0, x0], data[y0, x1]
    v10, v11 = data[y1, x0], data[y1, x1]
    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    inside_x = ((points[:, 0] >= 0) & (points[:, 0] <= width - 1))[:, None]
    inside_y = ((points[:, 1] >= 0) & (points[:, 1] <= height - 1))[:, None]
    return np.stack([dx * inside_x, dy * inside_y], axis=-1)


def bilinear_scatter(shape, points, grad_values):
    """Adjoint of bilinear_sample with respect to the map values.

    Returns d L / d data of the given (H, W[, C]) shape for upstream grad_values (N, C).
    """
    squeeze = len(shape) == 2
    shape3 = tuple(shape) + (1,) if squeeze else tuple(shape)
    height, width, channels = shape3
    grad_values = np.asarray(grad_values, dtype=np.float64).reshape(-1, channels)
    x0, x1, y0, y1, fx, fy, _, _ = _corners(shape3, points)
    fx = fx[:, None]
    fy = fy[:, None]
    grad = np.zeros((height * width, channels))
    for ys, xs, weight in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        np.add.at(grad, ys * width + xs, weight * grad_values)
    grad = grad.reshape(shape3)
    return grad[:, :, 0] if squeeze else grad


class Normalised(NamedTuple):
    unit: np.ndarray
    degenerate: np.ndarray


def l2_normalize(v, axis=-1, eps=DEGENERATE_EPS):
    """Unit vectors along `axis`; vectors with norm <= eps become zero and are flagged."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    degenerate = norm <= eps
    unit = np.where(degenerate, 0.0, v / np.where(degenerate, 1.0, norm))
    return Normalised(unit, np.squeeze(degenerate, axis=axis))


def l2_normalize_backward(v, grad_unit, axis=-1, eps=DEGENERATE_EPS):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    degenerate = norm <= eps
    safe = np.where(degenerate, 1.0, norm)
    unit = v / safe
    radial = np.sum(unit * grad_unit, axis=axis, keepdims=True)
    return np.where(degenerate, 0.0, (grad_unit - unit * radial) / safe)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probabilities, grad_out, axis=-1):
    inner = np.sum(grad_out * probabilities, axis=axis, keepdims=True)
    return probabilities * (grad_out - inner)
