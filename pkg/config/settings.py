"""
Django settings for the rks project.

rks runs entirely through management commands (see pipeline/management/commands),
so there is no database, no URL routing and no admin. The settings that matter are
the pipeline defaults in RKS_PIPELINE and the LOGGING configuration.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("RKS_SECRET_KEY", "rks-offline-toolkit-no-http-surface")

DEBUG = os.environ.get("RKS_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "core",
    "keypoints",
    "matcher",
    "pose_solver",
    "learner.apps.LearnerConfig",
    "simulator",
    "place_recognition",
    "pose_graph",
    "evaluation",
    "pipeline.apps.PipelineAppConfig",
]

DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"


# Logging
# Structured JSON lines on stderr; commands still talk to the user through self.stdout.

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "json": {
            "()": "pythonjsonlogger.json.JsonFormatter",
            "fmt": "%(asctime)s %(levelname)s %(name)s %(message)s",
            "rename_fields": {"asctime": "timestamp", "levelname": "level", "name": "logger"},
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "json",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": os.environ.get("RKS_LOG_LEVEL", "INFO"),
    },
}


# Pipeline defaults. Every key can be overridden from a YAML file passed with --config;
# provenance notes for each key live in pipeline/conf.py.

RKS_PIPELINE = {
    "pipeline": {
        "seed": 7,
        "sequences": {
            "train": {"kind": "loop", "length": 160.0, "step": 2.0, "lateral_offset": 0.0, "laps": 1},
            "test": {"kind": "loop", "length": 160.0, "step": 2.0, "lateral_offset": 1.0, "laps": 1},
        },
        "train_sequence": "train",
        "slam_sequence": "test",
        "queue_size": 64,
        "optimise_every": 10,
    },
    "simulator": {
        "azimuth_bins": 360,
        "range_bins": 160,
        "max_range": 32.0,
        "cart_size": 64,
        "resolution": 0.7,
        "allowed_resolutions": [0.7, 0.35],
        "speckle_mean": 0.05,
        "speckle_variance": 0.0025,
        "gain_std": 0.1,
        "ghost_rate": 0.1,
        "ghost_gain": 0.3,
        "saturation_probability": 0.01,
        "dropout_sectors": 1,
        "dropout_width": 0.2,
        "wall_amplitude": 1.0,
        "reflector_amplitude": 0.8,
        "mover_amplitude": 0.9,
        "target_sigma": 0.5,
        "world_extent": 80.0,
        "n_buildings": 14,
        "n_reflectors": 40,
        "n_movers": 4,
        "clearance": 4.0,
        "speed": 10.0,
        "max_speed": 40.0,
    },
    "keypoints": {
        "keypoint_count": None,
        "use_location_head": True,
        "use_score_head": True,
    },
    "matcher": {
        "temperature": 50.0,
        "block_size": 64,
        "precision": "float32",
    },
    "pose_solver": {
        "alpha": 10.0,
        "condition_limit": 1e8,
    },
    "learner": {
        "encoder_channels": [4, 4, 8],
        "decoder_channels": [8, 4, 4],
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "steps": 3000,
        "batch_size": 1,
        "augmentation_range": 3.141592653589793,
        "max_consecutive_skips": 20,
        "init_scale": 1.0,
        "triplet_steps": 0,
    },
    "place_recognition": {
        "margin": 0.5,
        "positives": 5,
        "negatives": 5,
        "positive_radius": 5.0,
        "negative_radius": 25.0,
        "closure_threshold": 0.95,
        "min_index_gap": 10,
        "backend": "kdtree",
        "max_candidates": 1,
        "embedding": "dense",
    },
    "pose_graph": {
        "max_iters": 50,
        "tol": 1e-9,
        "lambda_init": 1e-4,
        "lambda_max": 1e8,
        "translation_sigma": 0.5,
        "rotation_sigma": 0.05,
    },
    "evaluation": {
        "lengths": [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
        "step_size": 1,
        "distance": 5.0,
        "recall_max_n": 25,
    },
}
