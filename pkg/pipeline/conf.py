"""Pipeline configuration: defaults, YAML overrides, provenance, hashing and seeds."""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from django.conf import settings

from core.exceptions import ConfigurationError, DataError

logger = logging.getLogger(__name__)

# Entries of these mappings are user-named, so new keys are accepted there.
OPEN_SECTIONS = ("pipeline.sequences",)
SEQUENCE_KEYS = ("kind", "length", "step", "lateral_offset", "laps")

# Fixed order in which the root seed is split; changing it changes every output.
SEED_MODULES = ("world", "simulator", "learner", "sampler", "place_recognition")

PUBLISHED = "published"
DESIGN = "design"

PROVENANCE = {
    "pipeline.seed": DESIGN,
    "pipeline.sequences": DESIGN,
    "pipeline.train_sequence": DESIGN,
    "pipeline.slam_sequence": DESIGN,
    "pipeline.queue_size": DESIGN,
    "pipeline.optimise_every": DESIGN,
    "simulator.azimuth_bins": DESIGN,
    "simulator.range_bins": DESIGN,
    "simulator.max_range": DESIGN,
    "simulator.cart_size": DESIGN,
    "simulator.resolution": PUBLISHED,
    "simulator.allowed_resolutions": PUBLISHED,
    "simulator.speckle_mean": DESIGN,
    "simulator.speckle_variance": DESIGN,
    "simulator.gain_std": DESIGN,
    "simulator.ghost_rate": DESIGN,
    "simulator.ghost_gain": DESIGN,
    "simulator.saturation_probability": DESIGN,
    "simulator.dropout_sectors": DESIGN,
    "simulator.dropout_width": DESIGN,
    "simulator.wall_amplitude": DESIGN,
    "simulator.reflector_amplitude": DESIGN,
    "simulator.mover_amplitude": DESIGN,
    "simulator.target_sigma": DESIGN,
    "simulator.world_extent": DESIGN,
    "simulator.n_buildings": DESIGN,
    "simulator.n_reflectors": DESIGN,
    "simulator.n_movers": DESIGN,
    "simulator.clearance": DESIGN,
    "simulator.speed": DESIGN,
    "simulator.max_speed": DESIGN,
    "keypoints.keypoint_count": PUBLISHED,
    "keypoints.use_location_head": PUBLISHED,
    "keypoints.use_score_head": PUBLISHED,
    "matcher.temperature": DESIGN,
    "matcher.block_size": DESIGN,
    "matcher.precision": DESIGN,
    "pose_solver.alpha": PUBLISHED,
    "pose_solver.condition_limit": DESIGN,
    "learner.encoder_channels": DESIGN,
    "learner.decoder_channels": DESIGN,
    "learner.learning_rate": PUBLISHED,
    "learner.beta1": DESIGN,
    "learner.beta2": DESIGN,
    "learner.epsilon": DESIGN,
    "learner.steps": DESIGN,
    "learner.batch_size": DESIGN,
    "learner.augmentation_range": PUBLISHED,
    "learner.max_consecutive_skips": DESIGN,
    "learner.init_scale": DESIGN,
    "learner.triplet_steps": DESIGN,
    "place_recognition.margin": DESIGN,
    "place_recognition.positives": PUBLISHED,
    "place_recognition.negatives": PUBLISHED,
    "place_recognition.positive_radius": PUBLISHED,
    "place_recognition.negative_radius": PUBLISHED,
    "place_recognition.closure_threshold": DESIGN,
    "place_recognition.min_index_gap": DESIGN,
    "place_recognition.backend": PUBLISHED,
    "place_recognition.max_candidates": DESIGN,
    "place_recognition.embedding": DESIGN,
    "pose_graph.max_iters": DESIGN,
    "pose_graph.tol": DESIGN,
    "pose_graph.lambda_init": DESIGN,
    "pose_graph.lambda_max": DESIGN,
    "pose_graph.translation_sigma": DESIGN,
    "pose_graph.rotation_sigma": DESIGN,
    "evaluation.lengths": DESIGN,
    "evaluation.step_size": PUBLISHED,
    "evaluation.distance": PUBLISHED,
    "evaluation.recall_max_n": PUBLISHED,
}


def defaults():
    return copy.deepcopy(settings.RKS_PIPELINE)


def _coerce(key, default, value):
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(default, float) and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} must be a number, got {value!r}")
        return float(value) if isinstance(default, float) else value
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigurationError(f"{key} must be true or false, got {value!r}")
    return value


def _merge(base, overrides, prefix, unknown):
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"{prefix or 'config'} must be a mapping, got {type(overrides).__name__}")
    for key, value in overrides.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if prefix in OPEN_SECTIONS:
            entry = base.setdefault(key, {"lateral_offset": 0.0, "laps": 1})
            extra = sorted(set(value) - set(SEQUENCE_KEYS)) if isinstance(value, dict) else []
            unknown.extend(f"{dotted}.{k}" for k in extra)
            if isinstance(value, dict):
                entry.update({k: v for k, v in value.items() if k in SEQUENCE_KEYS})
            continue
        if key not in base:
            unknown.append(dotted)
        elif isinstance(base[key], dict):
            _merge(base[key], value, dotted, unknown)
        elif base[key] is None:
            base[key] = value
        else:
            base[key] = _coerce(dotted, base[key], value)


def merge_config(overrides, base=None):
    """Deep-merge `overrides` over `base` (default: settings.RKS_PIPELINE)."""
    merged = defaults() if base is None else copy.deepcopy(base)
    unknown = []
    _merge(merged, overrides or {}, "", unknown)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    for name, sequence in merged["pipeline"]["sequences"].items():
        missing = [k for k in ("kind", "length", "step") if k not in sequence]
        if missing:
            raise ConfigurationError(f"pipeline.sequences.{name} is missing {', '.join(missing)}")
    for key in ("train_sequence", "slam_sequence"):
        if merged["pipeline"][key] not in merged["pipeline"]["sequences"]:
            raise ConfigurationError(f"pipeline.{key} names an undefined sequence {merged['pipeline'][key]!r}")
    return merged


def load_config(path=None):
    """Defaults merged with the YAML file at `path`, if any."""
    if path is None:
        return merge_config({})
    path = Path(path)
    try:
        overrides = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else "?"
        raise DataError(f"{path}: {exc.problem} at line {line}") from exc
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: {exc}") from exc
    try:
        return merge_config(overrides or {})
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def config_hash(config):
    """First 16 hex digits of SHA-256 over the canonical JSON of `config`.

    The root seed is left out: it is recorded separately, and a checkpoint stays usable
    under another seed.
    """
    hashed = copy.deepcopy(config)
    hashed.get("pipeline", {}).pop("seed", None)
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _flatten(config, prefix=""):
    for key, value in config.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict) and dotted not in OPEN_SECTIONS:
            yield from _flatten(value, dotted)
        else:
            yield dotted, value


def describe_config(config=None):
    """One row per dotted key: value, default and provenance."""
    config = defaults() if config is None else config
    base = dict(_flatten(defaults()))
    rows = [
        {"key": key, "value": value, "default": base.get(key), "provenance": PROVENANCE.get(key, DESIGN)}
        for key, value in _flatten(config)
    ]
    return pd.DataFrame(rows, columns=["key", "value", "default", "provenance"])


def module_seeds(root):
    """Independent integer seeds per module, split from one root seed."""
    children = np.random.SeedSequence(int(root)).spawn(len(SEED_MODULES))
    return {name: int(child.generate_state(1, dtype=np.uint64)[0]) for name, child in zip(SEED_MODULES, children)}


@dataclass(frozen=True)
class RunContext:
    config: dict
    seed: int
    config_hash: str
    seeds: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config_path=None, seed=None):
        config = load_config(config_path)
        if seed is not None:
            if seed < 0 or seed >= 2**64:
                raise ConfigurationError(f"--seed must be an unsigned 64-bit integer, got {seed}")
            config["pipeline"]["seed"] = int(seed)
        root = int(config["pipeline"]["seed"])
        context = cls(config, root, config_hash(config), module_seeds(root))
        logger.info(f"config {context.config_hash}, root seed {root}")
        return context

    def manifest(self, command, outputs=(), **extra):
        return {
            "command": command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "seeds": dict(self.seeds),
            "outputs": [str(o) for o in outputs],
            **extra,
        }


def write_manifest(path, manifest):
    Path(path).write_text(yaml.safe_dump(manifest, sort_keys=True))


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no manifest")
    try:
        manifest = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or "config_hash" not in manifest:
        raise DataError(f"{path}: not an rks manifest")
    return manifest
