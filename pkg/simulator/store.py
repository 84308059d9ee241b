"""Scan and trajectory files, and the on-disk dataset layout.

Scan file, little-endian:

    offset  size  field
    0       8     magic b"RKSCAN1\\0"
    8       4     u32 format version (1)
    12      4     u32 width W
    16      4     u32 height H
    20      8     f64 resolution (m/px)
    28      8     i64 pose id
    36      4HW   float32 row-major payload

Trajectory file, text:

    # rks-trajectory v2
    # t <t0> <t1> ...
    <id> <x> <y> <theta>

Version 1 files (`<id> <t> <x> <y> <theta>`, no `# t` line) are still read.

Dataset directory:

    world.yaml
    <sequence>/trajectory.txt
    <sequence>/scans/<id>.rkscan
"""

import logging
from pathlib import Path

import numpy as np

from core.exceptions import DataError, parse_error
from core.grids import Grid2

from .services import Dataset, Trajectory
from .world import load_world, save_world

logger = logging.getLogger(__name__)

SCAN_MAGIC = b"RKSCAN1\x00"
SCAN_VERSION = 1
SCAN_HEADER = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("width", "<u4"),
        ("height", "<u4"),
        ("resolution", "<f8"),
        ("pose_id", "<i8"),
    ]
)
TRAJECTORY_HEADER = "# rks-trajectory v2"
TRAJECTORY_FIELDS = {
    TRAJECTORY_HEADER: ("id", "x", "y", "theta"),
    "# rks-trajectory v1": ("id", "t", "x", "y", "theta"),
}


def write_scan(path, scan, pose_id):
    header = np.zeros((), dtype=SCAN_HEADER)
    header["magic"] = SCAN_MAGIC
    header["version"] = SCAN_VERSION
    header["width"] = scan.width
    header["height"] = scan.height
    header["resolution"] = scan.resolution
    header["pose_id"] = pose_id
    with Path(path).open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(scan.plane.astype("<f4").tobytes())


def read_scan(path):
    """(Grid2 centred on the sensor, pose id)."""
    raw = Path(path).read_bytes()
    if len(raw) < SCAN_HEADER.itemsize:
        raise parse_error(path, "truncated scan header", offset=len(raw))
    header = np.frombuffer(raw, dtype=SCAN_HEADER, count=1)[0]
    if header["magic"] != SCAN_MAGIC.rstrip(b"\x00"):
        raise parse_error(path, "bad magic, not an rks scan", offset=0)
    if header["version"] != SCAN_VERSION:
        raise parse_error(path, f"unsupported scan version {header['version']}", offset=8)
    width, height = int(header["width"]), int(header["height"])
    if not header["resolution"] > 0:
        raise parse_error(path, "non-positive resolution", offset=20)
    payload = raw[SCAN_HEADER.itemsize :]
    expected = 4 * width * height
    if len(payload) != expected:
        offset = SCAN_HEADER.itemsize + min(len(payload), expected) // 4 * 4
        raise parse_error(path, f"expected {width}x{height} float32 payload, found {len(payload)} bytes", offset=offset)
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise parse_error(path, "non-finite scan value", offset=SCAN_HEADER.itemsize + 4 * bad)
    return Grid2.centred(data, float(header["resolution"])), int(header["pose_id"])


def write_trajectory(path, trajectory):
    lines = [TRAJECTORY_HEADER, "# t " + " ".join(repr(float(t)) for t in trajectory.timestamps)]
    for i, pose in enumerate(trajectory.poses):
        lines.append(f"{i} {float(pose[0])!r} {float(pose[1])!r} {float(pose[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path):
    """Trajectory from a v2 file (`id x y theta`, times on the `# t` line) or a v1 file (`id t x y theta`).

    A v2 file without a `# t` line gets timestamps equal to the pose ids.
    """
    lines = Path(path).read_text().splitlines()
    header = lines[0].strip() if lines else ""
    if header not in TRAJECTORY_FIELDS:
        raise parse_error(path, f"missing {TRAJECTORY_HEADER!r} header", line=1)
    layout = TRAJECTORY_FIELDS[header]
    timed = "t" in layout
    timestamps, times_line, poses = [], None, []
    for number, line in enumerate(lines[1:], start=2):
        if not timed and line.split()[:2] == ["#", "t"]:
            if times_line is not None:
                raise parse_error(path, f"second timestamp line (first on line {times_line})", line=number)
            try:
                timestamps = [float(v) for v in line.split()[2:]]
            except ValueError as exc:
                raise parse_error(path, f"bad timestamp ({exc})", line=number) from exc
            times_line = number
            continue
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != len(layout):
            raise parse_error(path, f"expected '{' '.join(layout)}', got {len(fields)} fields", line=number)
        try:
            pose_id = int(fields[0])
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise parse_error(path, f"bad number ({exc})", line=number) from exc
        if pose_id != len(poses):
            raise parse_error(path, f"pose ids must be consecutive from 0, got {pose_id}", line=number)
        if timed:
            timestamps.append(values[0])
        poses.append(values[-3:])
    if not poses:
        raise parse_error(path, "trajectory has no poses", line=len(lines))
    if not timed:
        if times_line is None:
            timestamps = list(range(len(poses)))
        elif len(timestamps) != len(poses):
            raise parse_error(path, f"{len(timestamps)} timestamps for {len(poses)} poses", line=times_line)
    try:
        return Trajectory(timestamps, poses)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_dataset(directory, name, dataset, world=None):
    directory = Path(directory)
    sequence = directory / name
    (sequence / "scans").mkdir(parents=True, exist_ok=True)
    if world is not None:
        save_world(directory / "world.yaml", world)
    write_trajectory(sequence / "trajectory.txt", dataset.trajectory)
    for i, scan in enumerate(dataset.scans):
        write_scan(sequence / "scans" / f"{i:06d}.rkscan", scan, i)
    logger.info(f"wrote {len(dataset)} scans to {sequence}")


def read_dataset(directory, name):
    sequence = Path(directory) / name
    if not sequence.is_dir():
        raise DataError(f"{sequence}: no such dataset sequence")
    trajectory = read_trajectory(sequence / "trajectory.txt")
    scans = []
    for i in range(len(trajectory)):
        path = sequence / "scans" / f"{i:06d}.rkscan"
        if not path.exists():
            raise DataError(f"{path}: missing scan for pose {i}")
        scan, pose_id = read_scan(path)
        if pose_id != i:
            raise parse_error(path, f"scan carries pose id {pose_id}, expected {i}", offset=28)
        scans.append(scan)
    return Dataset(scans, trajectory)


def read_world(directory):
    return load_world(Path(directory) / "world.yaml")
