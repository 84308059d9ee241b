"""Odometry drift, loop-closure precision and absolute trajectory error."""

import logging
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, DataError, InsufficientLengthError
from core.geometry import Se2, wrap_angle
from pose_solver.services import WeightedCorrespondences, solve_pose

logger = logging.getLogger(__name__)

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass(frozen=True)
class EvaluationOptions:
    lengths: tuple = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)
    step_size: int = 1
    distance: float = 5.0
    recall_max_n: int = 25

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        if not self.lengths or min(self.lengths) <= 0:
            raise ConfigurationError("evaluation.lengths must be positive")
        if self.step_size < 1 or not self.distance > 0 or self.recall_max_n < 1:
            raise ConfigurationError("evaluation.step_size, distance and recall_max_n must be positive")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def _as_poses(poses):
    if isinstance(poses, np.ndarray):
        return [Se2.from_vector(p) for p in poses.reshape(-1, 3)]
    return list(poses)


def arc_length(poses):
    positions = np.array([p.translation for p in poses])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(positions, axis=0), axis=1))])


@dataclass(frozen=True, eq=False)
class DriftReport:
    translation_pct: float
    rotation_deg_per_m: float
    per_length: pd.DataFrame  # length, subsequences, translation_pct, rotation_deg_per_m
    subsequences: pd.DataFrame  # one row per (start, length)


def subsequence_errors(estimate, truth, lengths, step_size=1):
    """End-point errors of every subsequence, as a DataFrame.

    The end frame of a subsequence starting at frame s is the frame whose ground-truth
    arc length is nearest to arc(s) + L; subsequences that run past the end are skipped.
    """
    est = _as_poses(estimate)
    gt = _as_poses(truth)
    if len(est) != len(gt):
        raise DataError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    dist = arc_length(gt)
    rows = []
    for start in range(0, len(gt), step_size):
        for length in lengths:
            goal = dist[start] + length
            if goal > dist[-1] + 1e-9:
                continue
            end = int(np.searchsorted(dist, goal))
            if end > 0 and abs(dist[end - 1] - goal) <= abs(dist[min(end, len(dist) - 1)] - goal):
                end -= 1
            end = min(end, len(dist) - 1)
            if end <= start:
                continue
            delta_gt = gt[start].inverse() @ gt[end]
            delta_est = est[start].inverse() @ est[end]
            # delta_est⁻¹ ∘ delta_gt, expanded so identical deltas give exactly zero
            offset = delta_est.rotation.T @ (delta_gt.translation - delta_est.translation)
            angle = wrap_angle(delta_gt.theta - delta_est.theta)
            rows.append(
                {
                    "start": start,
                    "end": end,
                    "length": length,
                    "translation": float(np.linalg.norm(offset)) / length,
                    "rotation": abs(float(angle)) / length,
                }
            )
    return pd.DataFrame(rows, columns=["start", "end", "length", "translation", "rotation"])


def kitti_drift(estimate, truth, lengths=EvaluationOptions().lengths, step_size=1):
    """Average normalised end-point errors: translation in percent, rotation in deg/m.

    Headline numbers average every subsequence; `per_length` averages within each length.
    """
    errors = subsequence_errors(estimate, truth, lengths, step_size)
    if errors.empty:
        total = arc_length(_as_poses(truth))[-1]
        raise InsufficientLengthError(
            f"ground truth covers {total:.2f} m, shorter than the shortest subsequence ({min(lengths)} m)"
        )
    per_length = (
        errors.groupby("length")
        .agg(subsequences=("start", "size"), translation_pct=("translation", "mean"), rotation_deg_per_m=("rotation", "mean"))
        .reset_index()
    )
    per_length["translation_pct"] *= 100.0
    per_length["rotation_deg_per_m"] = np.degrees(per_length["rotation_deg_per_m"])
    report = DriftReport(
        translation_pct=float(errors["translation"].mean() * 100.0),
        rotation_deg_per_m=float(np.degrees(errors["rotation"].mean())),
        per_length=per_length,
        subsequences=errors,
    )
    logger.info(
        f"drift over {len(errors)} subsequences: {report.translation_pct:.4f} %, {report.rotation_deg_per_m:.6f} deg/m"
    )
    return report


@dataclass(frozen=True)
class ClosureProposal:
    query: int
    match: int
    similarity: float


@dataclass(frozen=True)
class PrecisionReport:
    threshold: float
    true_positives: int
    false_positives: int
    precision: float
    recall: float


def _labels(proposals, positions, distance):
    positions = np.asarray(positions, dtype=np.float64)
    if not distance > 0:
        raise ConfigurationError(f"closure distance must be positive, got {distance}")
    if not proposals:
        return np.zeros(0), np.zeros(0, dtype=bool)
    similarity = np.array([p.similarity for p in proposals], dtype=np.float64)
    query = positions[[p.query for p in proposals]]
    match = positions[[p.match for p in proposals]]
    return similarity, np.linalg.norm(query - match, axis=1) <= distance


def closure_precision(proposals, positions, distance=5.0, threshold=-np.inf, positives=None):
    """Precision and recall of the proposals at or above `threshold`.

    A proposal is a true positive when the ground-truth positions of its two scans are
    within `distance`. Recall is taken over `positives` (default: the true closures among
    all proposals). With nothing accepted precision is reported as 1.
    """
    similarity, correct = _labels(list(proposals), positions, distance)
    accepted = similarity >= threshold
    tp = int(np.sum(accepted & correct))
    fp = int(np.sum(accepted & ~correct))
    positives = int(correct.sum()) if positives is None else int(positives)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / positives if positives else 0.0
    return PrecisionReport(float(threshold), tp, fp, precision, recall)


def precision_recall_curve(proposals, positions, distance=5.0, thresholds=None):
    """PrecisionReport rows for every threshold (default: each distinct proposal similarity)."""
    proposals = list(proposals)
    similarity, correct = _labels(proposals, positions, distance)
    if thresholds is None:
        thresholds = np.unique(similarity)
    rows = [closure_precision(proposals, positions, distance, t, int(correct.sum())).__dict__ for t in thresholds]
    return pd.DataFrame(rows, columns=["threshold", "true_positives", "false_positives", "precision", "recall"])


def align(estimate, truth):
    """Rigid transform G minimising sum |G(est_k) - gt_k|² over positions."""
    est = np.asarray(estimate, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(est) != len(gt):
        raise DataError(f"estimate has {len(est)} positions, ground truth {len(gt)}")
    if len(est) < 2:
        return Se2.from_xytheta(*(gt[0] - est[0]), 0.0) if len(est) else Se2.identity()
    return solve_pose(WeightedCorrespondences.uniform(est, gt)).pose


def absolute_trajectory_error(estimate, truth):
    """Positional RMSE (m) after rigid alignment of the estimate onto the ground truth."""
    est = _positions(estimate)
    gt = _positions(truth)
    G = align(est, gt)
    residual = G.apply(est) - gt
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def _positions(trajectory):
    if isinstance(trajectory, np.ndarray):
        return trajectory.reshape(len(trajectory), -1)[:, :2]
    return np.array([p.translation for p in trajectory]).reshape(-1, 2)
