"""Scan rendering, trajectories and datasets.

A scan is rendered in polar form first (rows are azimuth bins counter-clockwise from
the sensor's +x axis, columns are range bins whose centres sit at (r + 0.5) * max_range / R),
corrupted with radar-like artefacts, then resampled bilinearly onto a Cartesian grid
centred on the sensor and normalised to [0, 1].

Noise is drawn from a generator keyed on (seed, pose rounded to the micrometre), so the
same pose always produces the same scan whatever order scans are rendered in.
"""

import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from core.exceptions import ConfigurationError, DataError, NoInformationError
from core.geometry import Se2, wrap_angle
from core.grids import Grid2, bilinear_sample, pix2world
from pose_solver.services import WeightedCorrespondences

logger = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("straight", "loop", "figure-eight")
POSE_QUANTUM = 1e-6


@dataclass(frozen=True)
class SimulatorOptions:
    azimuth_bins: int = 360
    range_bins: int = 160
    max_range: float = 32.0
    cart_size: int = 64
    resolution: float = 0.7
    allowed_resolutions: tuple = (0.7, 0.35)
    speckle_mean: float = 0.05
    speckle_variance: float = 0.0025
    gain_std: float = 0.1
    ghost_rate: float = 0.1
    ghost_gain: float = 0.3
    saturation_probability: float = 0.01
    dropout_sectors: int = 1
    dropout_width: float = 0.2
    wall_amplitude: float = 1.0
    reflector_amplitude: float = 0.8
    mover_amplitude: float = 0.9
    target_sigma: float = 0.5
    world_extent: float = 80.0
    n_buildings: int = 14
    n_reflectors: int = 40
    n_movers: int = 4
    clearance: float = 4.0
    speed: float = 10.0
    max_speed: float = 40.0

    def __post_init__(self):
        object.__setattr__(self, "allowed_resolutions", tuple(float(r) for r in self.allowed_resolutions))
        if min(self.azimuth_bins, self.range_bins, self.cart_size) < 1 or not (self.max_range > 0 and self.target_sigma > 0):
            raise ConfigurationError("simulator dimensions must be positive")
        if not any(np.isclose(self.resolution, r) for r in self.allowed_resolutions):
            raise ConfigurationError(
                f"simulator.resolution {self.resolution} is not one of {list(self.allowed_resolutions)}"
            )
        if self.speckle_variance < 0 or self.speckle_mean < 0 or self.gain_std < 0:
            raise ConfigurationError("simulator noise levels must be non-negative")
        for name in ("ghost_rate", "saturation_probability"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"simulator.{name} must lie in [0, 1]")
        if not 0 < self.speed <= self.max_speed:
            raise ConfigurationError("simulator.speed must be positive and at most simulator.max_speed")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def noiseless(self):
        return replace(
            self,
            speckle_mean=0.0,
            speckle_variance=0.0,
            gain_std=0.0,
            ghost_rate=0.0,
            saturation_probability=0.0,
            dropout_sectors=0,
        )

    @property
    def range_step(self):
        return self.max_range / self.range_bins

    @property
    def azimuth_step(self):
        return 2 * np.pi / self.azimuth_bins


class Trajectory:
    """Timestamped ground-truth poses, stored as an (N, 3) array of (x, y, theta)."""

    def __init__(self, timestamps, poses, max_speed=np.inf):
        self.timestamps = np.array(timestamps, dtype=np.float64).reshape(-1)
        self.poses = np.array(poses, dtype=np.float64).reshape(-1, 3)
        if len(self.timestamps) != len(self.poses):
            raise DataError(f"{len(self.timestamps)} timestamps for {len(self.poses)} poses")
        if not np.all(np.isfinite(self.poses)):
            raise DataError("trajectory contains non-finite poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("trajectory timestamps must be strictly increasing")
        if len(self.poses) > 1:
            speeds = np.linalg.norm(np.diff(self.poses[:, :2], axis=0), axis=1) / np.diff(self.timestamps)
            if np.max(speeds) > max_speed * (1 + 1e-9):
                k = int(np.argmax(speeds))
                raise DataError(f"speed {speeds[k]:.2f} m/s between poses {k} and {k + 1} exceeds {max_speed} m/s")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, index):
        return Se2.from_vector(self.poses[index])

    @property
    def positions(self):
        return self.poses[:, :2]

    def se2_poses(self):
        return [Se2.from_vector(p) for p in self.poses]

    def relative_poses(self):
        """inverse(T_i) ∘ T_{i+1} for every consecutive pair."""
        poses = self.se2_poses()
        return [a.inverse() @ b for a, b in zip(poses, poses[1:])]

    @classmethod
    def from_relative(cls, start, relatives, timestamps):
        poses = [start]
        for relative in relatives:
            poses.append(poses[-1] @ relative)
        return cls(timestamps, [p.to_vector() for p in poses])

    def arc_length(self):
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def _circle(s, radius, sign=1.0):
    phi = s / radius
    x = radius * np.sin(phi)
    y = sign * (radius - radius * np.cos(phi))
    return np.stack([x, y, sign * phi], axis=1)


def generate_trajectory(kind, length, step, lateral_offset=0.0, laps=1, speed=10.0, max_speed=np.inf):
    """Smooth trajectory starting at the origin heading along +x.

    "loop" is a circle of circumference `length` traversed `laps` times and ends on its
    start. "figure-eight" is two tangent circles. `lateral_offset` shifts every pose
    sideways (positive to the left), which gives a second traversal of the same route.
    """
    if kind not in TRAJECTORY_KINDS:
        raise ConfigurationError(f"unknown trajectory kind {kind!r}, expected one of {list(TRAJECTORY_KINDS)}")
    if not (step > 0 and length >= step):
        raise ConfigurationError(f"trajectory needs length >= step > 0, got length {length}, step {step}")
    if laps < 1 or (kind == "straight" and laps != 1):
        raise ConfigurationError(f"invalid lap count {laps} for a {kind} trajectory")

    if kind == "straight":
        count = int(np.floor(length / step + 1e-9))
        s = np.arange(count + 1) * step
        poses = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
    else:
        total = length * laps
        count = int(round(total / step))
        s = (np.arange(count + 1) * (total / count)) % length
        if kind == "loop":
            poses = _circle(s, length / (2 * np.pi))
        else:
            radius = length / (4 * np.pi)
            first = s < length / 2
            poses = np.where(first[:, None], _circle(s, radius), _circle(s - length / 2, radius, sign=-1.0))
    poses[:, 2] = wrap_angle(poses[:, 2])
    if lateral_offset:
        poses[:, 0] -= lateral_offset * np.sin(poses[:, 2])
        poses[:, 1] += lateral_offset * np.cos(poses[:, 2])
    spacing = np.linalg.norm(np.diff(poses[:, :2], axis=0), axis=1)
    dt = max(float(np.max(spacing)), step) / speed
    return Trajectory(np.arange(len(poses)) * dt, poses, max_speed)


def _noise_rng(seed, pose):
    quantised = np.round(np.asarray(pose.to_vector()) / POSE_QUANTUM).astype(np.int64)
    keys = [int(2 * abs(q) + (q < 0)) for q in quantised]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def _ray_wall_ranges(origin, angles, walls):
    """Distance along each ray to the nearest wall, inf where none is hit."""
    if len(walls) == 0:
        return np.full(len(angles), np.inf)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    a = walls[:, :2] - origin
    e = walls[:, 2:] - walls[:, :2]
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (a[None, :, 0] * e[None, :, 1] - a[None, :, 1] * e[None, :, 0]) / denom
        u = (a[None, :, 0] * d[:, None, 1] - a[None, :, 1] * d[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (s > 0) & (u >= 0) & (u <= 1)
    return np.where(hit, s, np.inf).min(axis=1)


def _bin_centres(options):
    """(A, R, 2) sensor-frame position of every polar bin centre."""
    ranges = (np.arange(options.range_bins) + 0.5) * options.range_step
    bearings = np.arange(options.azimuth_bins) * options.azimuth_step
    directions = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)
    return directions[:, None, :] * ranges[None, :, None]


def _gaussian(d2, sigma):
    """Return profile truncated at 4 sigma."""
    return np.where(d2 <= 16 * sigma**2, np.exp(-0.5 * d2 / sigma**2), 0.0)


def clean_polar(world, pose, options, time=0.0, include_movers=True):
    """Noise-free polar power image of the world seen from `pose`.

    Walls return along each ray at the first hit; point targets return with an
    isotropic footprint of `target_sigma` metres unless a wall on their bearing is nearer.
    """
    polar = np.zeros((options.azimuth_bins, options.range_bins))
    origin = np.asarray(pose.to_vector()[:2])
    bearings = np.arange(options.azimuth_bins) * options.azimuth_step
    wall_ranges = _ray_wall_ranges(origin, bearings + pose.theta, world.walls)
    centres = (np.arange(options.range_bins) + 0.5) * options.range_step

    rows = np.flatnonzero(wall_ranges < options.max_range)
    offsets = centres[None, :] - wall_ranges[rows, None]
    polar[rows] += options.wall_amplitude * _gaussian(offsets**2, options.target_sigma)

    targets = [(world.reflectors, options.reflector_amplitude)]
    if include_movers:
        targets.append((world.mover_positions(time), options.mover_amplitude))
    bins = None
    for points, amplitude in targets:
        if len(points) == 0:
            continue
        local = pose.inverse().apply(points)
        ranges = np.linalg.norm(local, axis=1)
        nearest = np.round(np.arctan2(local[:, 1], local[:, 0]) / options.azimuth_step).astype(int)
        keep = (ranges < options.max_range) & (ranges <= wall_ranges[nearest % options.azimuth_bins])
        if bins is None and keep.any():
            bins = _bin_centres(options)
        for point in local[keep]:
            d2 = ((bins - point) ** 2).sum(axis=2)
            polar += amplitude * _gaussian(d2, options.target_sigma)
    return polar


def corrupt_polar(polar, options, rng):
    """Apply ghosts, gain noise, speckle, dropout and saturation, then clip to [0, 1]."""
    polar = polar.copy()
    n_az, n_range = polar.shape
    if options.ghost_rate > 0:
        rows, cols = np.nonzero(polar > 0)
        echo = rng.random(len(rows)) < options.ghost_rate
        doubled = 2 * cols
        echo &= doubled < n_range
        ghosts = options.ghost_gain * polar[rows[echo], cols[echo]]
        np.add.at(polar, (rows[echo], doubled[echo]), ghosts)
    if options.gain_std > 0:
        polar *= np.maximum(1.0 + options.gain_std * rng.standard_normal((n_az, 1)), 0.0)
    if options.speckle_mean > 0:
        if options.speckle_variance > 0:
            shape = options.speckle_mean**2 / options.speckle_variance
            polar += rng.gamma(shape, options.speckle_variance / options.speckle_mean, size=polar.shape)
        else:
            polar += options.speckle_mean
    if options.dropout_sectors > 0 and options.dropout_width > 0:
        bearings = np.arange(n_az) * options.azimuth_step
        for start in rng.uniform(0, 2 * np.pi, options.dropout_sectors):
            polar[(bearings - start) % (2 * np.pi) < options.dropout_width] = 0.0
    if options.saturation_probability > 0:
        polar[rng.random(n_az) < options.saturation_probability] = 1.0
    return np.clip(polar, 0.0, 1.0)


def polar_to_cartesian(polar, options):
    """Bilinear resample of a polar image onto the sensor-centred Cartesian grid."""
    grid = Grid2.centred(np.zeros((options.cart_size, options.cart_size)), options.resolution)
    q = pix2world(grid.pixel_coordinates(), grid)
    ranges = np.linalg.norm(q, axis=1)
    azimuth = (np.arctan2(q[:, 1], q[:, 0]) % (2 * np.pi)) / options.azimuth_step
    # repeat the first azimuth row so interpolation wraps through 2 pi
    wrapped = np.vstack([polar, polar[:1]])
    points = np.stack([ranges / options.range_step - 0.5, azimuth], axis=1)
    values = bilinear_sample(wrapped, points).values[:, 0]
    values[ranges > options.max_range] = 0.0
    return grid.with_data(values.reshape(options.cart_size, options.cart_size))


def render_polar(world, pose, options, seed, time=0.0):
    if not world.contains(pose.to_vector()):
        raise DataError(f"pose {pose} lies outside the {world.extent} m world")
    polar = clean_polar(world, pose, options, time)
    return corrupt_polar(polar, options, _noise_rng(seed, pose))


def render_scan(world, pose, options, seed, time=0.0):
    """Cartesian scan (Grid2, values in [0, 1]) of `world` from `pose`."""
    return polar_to_cartesian(render_polar(world, pose, options, seed, time), options)


def landmark_mask(world, pose, options, threshold=0.05):
    """Boolean (H, W) mask of Cartesian pixels lit by static landmarks alone."""
    polar = clean_polar(world, pose, options, include_movers=False)
    return polar_to_cartesian(polar, options).plane > threshold


def oracle_correspondences(world, pose_src, pose_dst, options):
    """Static features inside both scans, in each scan's sensor frame, with unit weights."""
    points = world.static_points()
    half = 0.5 * (options.cart_size - 1) * options.resolution
    src = pose_src.inverse().apply(points)
    dst = pose_dst.inverse().apply(points)
    inside = np.all(np.abs(src) <= half, axis=1) & np.all(np.abs(dst) <= half, axis=1)
    if inside.sum() < 2:
        raise NoInformationError(f"only {int(inside.sum())} landmarks are visible in both scans")
    return WeightedCorrespondences.uniform(src[inside], dst[inside])


@dataclass(frozen=True, eq=False)
class Dataset:
    scans: list
    trajectory: Trajectory

    def __len__(self):
        return len(self.scans)

    @property
    def relative_poses(self):
        return self.trajectory.relative_poses()


def make_dataset(world, trajectory, options, seed):
    scans = [render_scan(world, trajectory[i], options, seed, trajectory.timestamps[i]) for i in range(len(trajectory))]
    logger.info(f"rendered {len(scans)} scans of {options.cart_size} px at {options.resolution} m/px")
    return Dataset(scans, trajectory)
