"""Embedding store file.

Little-endian layout:

    offset  size  field
    0       8     magic b"RKEMB1\\0\\0"
    8       4     u32 format version (1)
    12      4     u32 channels C
    16      8     u64 record count n
    24      ...   n records of: i8 scan id, i8 trajectory id, f8 x, f8 y, C x f4 vector
"""

from pathlib import Path

import numpy as np

from core.exceptions import parse_error

from .services import LocationEmbedding

MAGIC = b"RKEMB1\x00\x00"
VERSION = 1
HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("channels", "<u4"), ("count", "<u8")])


def record_dtype(channels):
    return np.dtype(
        [("scan_id", "<i8"), ("trajectory_id", "<i8"), ("x", "<f8"), ("y", "<f8"), ("vector", "<f4", (channels,))]
    )


def write_embeddings(path, embeddings):
    embeddings = list(embeddings)
    channels = embeddings[0].channels if embeddings else 0
    header = np.zeros((), dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["channels"] = channels
    header["count"] = len(embeddings)
    records = np.zeros(len(embeddings), dtype=record_dtype(channels))
    for row, embedding in enumerate(embeddings):
        records[row] = (
            embedding.scan_id,
            embedding.trajectory_id,
            embedding.position[0],
            embedding.position[1],
            embedding.vector,
        )
    with Path(path).open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())


def read_embeddings(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise parse_error(path, "truncated embedding store header", offset=len(raw))
    header = np.frombuffer(raw, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC.rstrip(b"\x00"):
        raise parse_error(path, "bad magic, not an rks embedding store", offset=0)
    if header["version"] != VERSION:
        raise parse_error(path, f"unsupported embedding store version {header['version']}", offset=8)
    dtype = record_dtype(int(header["channels"]))
    count = int(header["count"])
    body = raw[HEADER.itemsize :]
    if len(body) != count * dtype.itemsize:
        complete = len(body) // dtype.itemsize
        raise parse_error(
            path,
            f"expected {count} records of {dtype.itemsize} bytes, found {len(body)} bytes",
            offset=HEADER.itemsize + min(complete, count) * dtype.itemsize,
        )
    records = np.frombuffer(body, dtype=dtype, count=count)
    return [
        LocationEmbedding(r["vector"].astype(np.float64), int(r["scan_id"]), int(r["trajectory_id"]), (r["x"], r["y"]))
        for r in records
    ]
