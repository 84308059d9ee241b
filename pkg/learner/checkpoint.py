"""Model checkpoint file.

Byte layout, little-endian:

    offset  size  field
    0       8     magic b"RKCKPT1\\0"
    8       4     u32 format version (1)
    12      16    config hash, ASCII hex
    28      12    3 x u32 encoder channels
    40      12    3 x u32 decoder channels
    52      8     u64 parameter count n
    60      8n    float64 parameters in FeatureNet layout order
"""

import logging
from pathlib import Path

import numpy as np

from core.exceptions import ConfigurationError, parse_error

from .network import FeatureNet

logger = logging.getLogger(__name__)

MAGIC = b"RKCKPT1\x00"
VERSION = 1
HEADER = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("config_hash", "S16"),
        ("encoder_channels", "<u4", (3,)),
        ("decoder_channels", "<u4", (3,)),
        ("parameter_count", "<u8"),
    ]
)


def save_checkpoint(path, net, config_hash):
    header = np.zeros((), dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["config_hash"] = config_hash.encode("ascii")
    header["encoder_channels"] = net.encoder_channels
    header["decoder_channels"] = net.decoder_channels
    header["parameter_count"] = net.parameter_count
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(net.params.astype("<f8").tobytes())
    logger.info(f"wrote checkpoint {path} ({net.parameter_count} parameters, config {config_hash})")


def load_checkpoint(path, expected_hash=None):
    """FeatureNet and config hash stored in `path`.

    When `expected_hash` is given a different stored hash is refused.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise parse_error(path, f"file is {len(raw)} bytes, shorter than the checkpoint header", offset=len(raw))
    header = np.frombuffer(raw, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC.rstrip(b"\x00"):
        raise parse_error(path, "bad magic, not an rks checkpoint", offset=0)
    if header["version"] != VERSION:
        raise parse_error(path, f"unsupported checkpoint version {header['version']}", offset=8)
    count = int(header["parameter_count"])
    payload = raw[HEADER.itemsize :]
    if len(payload) != 8 * count:
        offset = HEADER.itemsize + min(len(payload), 8 * count)
        raise parse_error(path, f"expected {count} float64 parameters, payload holds {len(payload)} bytes", offset=offset)
    stored_hash = header["config_hash"].decode("ascii")
    if expected_hash is not None and stored_hash != expected_hash:
        raise ConfigurationError(
            f"{path}: checkpoint was trained with config {stored_hash}, current config is {expected_hash}"
        )
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    net = FeatureNet(tuple(header["encoder_channels"]), tuple(header["decoder_channels"]), params)
    return net, stored_hash
