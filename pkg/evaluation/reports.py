"""Report tables (fixed-width text) and delimited exports for plotting."""

import logging
from pathlib import Path

import pandas as pd

from core.exceptions import DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def drift_frame(report):
    """Per-length rows plus a pooled "all" row."""
    frame = report.per_length.copy()
    frame["length"] = frame["length"].map(lambda v: f"{v:g}")
    pooled = pd.DataFrame(
        [
            {
                "length": "all",
                "subsequences": int(frame["subsequences"].sum()),
                "translation_pct": report.translation_pct,
                "rotation_deg_per_m": report.rotation_deg_per_m,
            }
        ]
    )
    return pd.concat([frame, pooled], ignore_index=True)


def precision_frame(reports):
    return pd.DataFrame([r.__dict__ for r in reports])


def recall_frame(recall):
    return pd.DataFrame({"n": range(1, len(recall) + 1), "recall": list(recall)})


def _header(title, config_hash):
    return f"# rks {title} config={config_hash}\n"


def write_table(path, frame, title, config_hash):
    """Fixed-width text table under a one-line header naming the config hash."""
    text = frame.to_string(index=False, float_format=lambda v: FLOAT_FORMAT % v)
    Path(path).write_text(_header(title, config_hash) + text + "\n")
    logger.info(f"wrote {title} table {path}")


def write_csv(path, frame, title, config_hash):
    with Path(path).open("w", newline="") as fh:
        fh.write(_header(title, config_hash))
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"wrote {title} export {path}")


def read_csv(path):
    """Frame and header fields ({"title": ..., "config": ...}) of a file written by write_csv."""
    path = Path(path)
    try:
        with path.open() as fh:
            first = fh.readline()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    if not first.startswith("# rks "):
        raise DataError(f"{path}: missing '# rks' header at line 1")
    words = first[len("# rks ") :].split()
    header = {"title": " ".join(w for w in words if not w.startswith("config=")), "config": ""}
    for word in words:
        if word.startswith("config="):
            header["config"] = word[len("config=") :]
    try:
        frame = pd.read_csv(path, skiprows=1)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return frame, header
