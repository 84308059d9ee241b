"""Synthetic worlds: wall segments, point reflectors and moving objects, in metres.

Worlds are stored as YAML:

    version: 1
    seed: 7
    extent: 80.0
    walls: [[x0, y0, x1, y1], ...]
    reflectors: [[x, y], ...]
    movers: [{waypoints: [[x, y], ...], speed: 4.0}, ...]
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from core.exceptions import ConfigurationError, DataError, parse_error

logger = logging.getLogger(__name__)

WORLD_VERSION = 1


@dataclass(frozen=True, eq=False)
class Mover:
    """Object travelling back and forth along a polyline at constant speed."""

    waypoints: np.ndarray
    speed: float

    def __post_init__(self):
        waypoints = np.array(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(waypoints) < 2:
            raise DataError("a mover needs at least two waypoints")
        if not self.speed >= 0:
            raise DataError(f"mover speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "waypoints", waypoints)
        object.__setattr__(self, "speed", float(self.speed))

    @property
    def track_length(self):
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def position(self, time):
        length = self.track_length
        if length == 0:
            return self.waypoints[0].copy()
        s = (self.speed * time) % (2 * length)
        if s > length:
            s = 2 * length - s
        segments = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        ends = np.cumsum(segments)
        k = min(int(np.searchsorted(ends, s)), len(segments) - 1)
        start = ends[k] - segments[k]
        u = 0.0 if segments[k] == 0 else (s - start) / segments[k]
        return self.waypoints[k] + u * (self.waypoints[k + 1] - self.waypoints[k])


@dataclass(frozen=True, eq=False)
class World:
    extent: float
    walls: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    reflectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    movers: tuple = ()
    seed: int = 0

    def __post_init__(self):
        walls = np.array(self.walls, dtype=np.float64).reshape(-1, 4)
        reflectors = np.array(self.reflectors, dtype=np.float64).reshape(-1, 2)
        if not self.extent > 0:
            raise DataError(f"world extent must be positive, got {self.extent}")
        if not (np.all(np.isfinite(walls)) and np.all(np.isfinite(reflectors))):
            raise DataError("world geometry contains non-finite coordinates")
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "reflectors", reflectors)
        object.__setattr__(self, "movers", tuple(self.movers))

    def contains(self, position):
        return bool(np.all(np.abs(np.asarray(position)[:2]) <= self.extent))

    def mover_positions(self, time):
        if not self.movers:
            return np.zeros((0, 2))
        return np.array([mover.position(time) for mover in self.movers])

    def static_points(self):
        """Reflectors plus wall endpoints: the static features an oracle can match."""
        return np.concatenate([self.reflectors, self.walls[:, :2], self.walls[:, 2:]], axis=0)


def _rectangle_walls(centre, half_size, angle):
    c, s = np.cos(angle), np.sin(angle)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half_size
    corners = corners @ np.array([[c, s], [-s, c]]) + centre
    return np.hstack([corners, np.roll(corners, -1, axis=0)])


def _segment_distances(points, walls):
    """(P, M) distance from every point to every wall segment."""
    if len(points) == 0 or len(walls) == 0:
        return np.full((len(points), len(walls)), np.inf)
    a, b = walls[:, :2], walls[:, 2:]
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    denom = np.maximum((ab**2).sum(axis=1), 1e-12)
    u = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + u[:, :, None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _inside_rectangle(points, walls):
    # corners are the wall start points, in order
    corners = walls[:, :2]
    edges = walls[:, 2:] - corners
    rel = points[:, None, :] - corners[None]
    cross = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
    return np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)


def generate_world(options, seed, avoid=()):
    """Random buildings, reflectors and movers keeping `options.clearance` metres off the `avoid` paths."""
    rng = np.random.default_rng(seed)
    keep_clear = np.concatenate([np.asarray(p, dtype=np.float64)[:, :2] for p in avoid], axis=0) if avoid else np.zeros((0, 2))
    extent = options.world_extent
    if len(keep_clear) and np.any(np.abs(keep_clear) > extent - options.clearance):
        raise ConfigurationError(f"trajectory leaves the {extent} m world (simulator.world_extent)")

    walls = []
    attempts = 0
    while len(walls) < options.n_buildings and attempts < 200 * max(options.n_buildings, 1):
        attempts += 1
        half = rng.uniform(2.0, 6.0, size=2)
        centre = rng.uniform(-extent + half.max(), extent - half.max(), size=2)
        candidate = _rectangle_walls(centre, half, rng.uniform(0, np.pi / 2))
        if len(keep_clear):
            if np.any(_segment_distances(keep_clear, candidate).min(axis=1) < options.clearance):
                continue
            if np.any(_inside_rectangle(keep_clear, candidate)):
                continue
        walls.append(candidate)
    if len(walls) < options.n_buildings:
        logger.warning(f"placed {len(walls)} of {options.n_buildings} buildings clear of the trajectory")
    walls = np.concatenate(walls, axis=0) if walls else np.zeros((0, 4))

    reflectors = []
    attempts = 0
    while len(reflectors) < options.n_reflectors and attempts < 200 * max(options.n_reflectors, 1):
        attempts += 1
        point = rng.uniform(-extent, extent, size=2)
        if len(keep_clear) and np.min(np.linalg.norm(keep_clear - point, axis=1)) < options.clearance / 2:
            continue
        reflectors.append(point)
    reflectors = np.array(reflectors).reshape(-1, 2)

    movers = []
    for _ in range(options.n_movers):
        start = rng.uniform(-extent, extent, size=2)
        heading = rng.uniform(-np.pi, np.pi)
        end = np.clip(start + rng.uniform(10.0, 40.0) * np.array([np.cos(heading), np.sin(heading)]), -extent, extent)
        movers.append(Mover(np.array([start, end]), rng.uniform(2.0, 8.0)))

    world = World(extent, walls, reflectors, tuple(movers), seed)
    logger.info(f"generated world with {len(walls)} walls, {len(reflectors)} reflectors, {len(movers)} movers")
    return world


def save_world(path, world):
    document = {
        "version": WORLD_VERSION,
        "seed": int(world.seed),
        "extent": float(world.extent),
        "walls": world.walls.tolist(),
        "reflectors": world.reflectors.tolist(),
        "movers": [{"waypoints": m.waypoints.tolist(), "speed": m.speed} for m in world.movers],
    }
    with Path(path).open("w") as fh:
        yaml.safe_dump(document, fh, sort_keys=False)


def load_world(path):
    try:
        with Path(path).open() as fh:
            document = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise parse_error(path, f"invalid YAML ({exc.problem})", line=line) from exc
    if not isinstance(document, dict) or document.get("version") != WORLD_VERSION:
        raise parse_error(path, f"not an rks world file (expected version: {WORLD_VERSION})", line=1)
    try:
        movers = tuple(Mover(m["waypoints"], m["speed"]) for m in document.get("movers", []))
        return World(
            float(document["extent"]),
            document.get("walls") or np.zeros((0, 4)),
            document.get("reflectors") or np.zeros((0, 2)),
            movers,
            int(document.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed world description: {exc}") from exc
