"""Weighted Procrustes pose estimation and the pose training loss.

solve_pose finds the rigid transform (R, t) minimising sum_i w_i |R q_si + t - q_di|^2
through the SVD of the weighted cross-covariance, with the det(V U^T) correction so
R is always a proper rotation. In 2D the optimal rotation angle is also
atan2(b, a) with a = S00 + S11 and b = S01 - S10; the backward pass differentiates
that closed form instead of the SVD.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.exceptions import (
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    GradientUnavailableError,
    NoInformationError,
)
from core.geometry import Se2, rot, rot_derivative

logger = logging.getLogger(__name__)

WEIGHT_EPS = 1e-12
GEOMETRY_EPS = 1e-12
CONDITION_LIMIT = 1e8
# Below this the loss terms sit at their minimum and report a zero subgradient.
LOSS_NORM_EPS = 1e-9

# d atan2(b, a) / d(a, b) uses J y and J^T x with J the quarter-turn below.
J = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass(frozen=True)
class PoseSolverOptions:
    alpha: float = 10.0
    condition_limit: float = CONDITION_LIMIT

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"pose_solver.alpha must be >= 0, got {self.alpha}")
        if not self.condition_limit > 1:
            raise ConfigurationError(f"pose_solver.condition_limit must be > 1, got {self.condition_limit}")

    @classmethod
    def from_dict(cls, values):
        return cls(alpha=float(values["alpha"]), condition_limit=float(values["condition_limit"]))


@dataclass(frozen=True, eq=False)
class WeightedCorrespondences:
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(src) == len(dst) == len(weights)):
            raise DataError(f"correspondence lengths differ: {len(src)}, {len(dst)}, {len(weights)}")
        if len(src) < 2:
            raise DataError(f"at least two correspondences are required, got {len(src)}")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst)) and np.all(np.isfinite(weights))):
            raise DataError("correspondences contain non-finite values")
        if np.any(weights < 0):
            raise DataError("correspondence weights must be non-negative")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_match_set(cls, match_set):
        return cls(match_set.src_points, match_set.dst_points, match_set.weights)

    @classmethod
    def uniform(cls, src, dst):
        return cls(src, dst, np.ones(len(np.asarray(src))))

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class _Moments:
    total_weight: float
    src_centroid: np.ndarray
    dst_centroid: np.ndarray
    src_centred: np.ndarray
    dst_centred: np.ndarray
    covariance: np.ndarray

    @property
    def a(self):
        return self.covariance[0, 0] + self.covariance[1, 1]

    @property
    def b(self):
        return self.covariance[0, 1] - self.covariance[1, 0]


def _moments(corr):
    w = corr.weights
    total = float(w.sum())
    if total <= WEIGHT_EPS:
        raise NoInformationError(f"correspondence weights sum to {total:.3e}; no information to solve a pose")
    src_centroid = w @ corr.src / total
    dst_centroid = w @ corr.dst / total
    x = corr.src - src_centroid
    y = corr.dst - dst_centroid
    covariance = (x * w[:, None]).T @ y
    return _Moments(total, src_centroid, dst_centroid, x, y, covariance)


@dataclass(frozen=True, eq=False)
class PoseSolution:
    pose: Se2
    condition: float
    ill_conditioned: bool
    total_weight: float

    @property
    def rotation(self):
        return self.pose.rotation

    @property
    def translation(self):
        return self.pose.translation


def solve_pose(corr, condition_limit=CONDITION_LIMIT):
    """Weighted least-squares rigid transform mapping corr.src onto corr.dst."""
    m = _moments(corr)
    U, sigma, Vt = np.linalg.svd(m.covariance)
    spread = float(np.sum(corr.weights * (np.sum(m.src_centred**2, axis=1) + np.sum(m.dst_centred**2, axis=1))))
    if sigma[0] <= GEOMETRY_EPS * spread or np.hypot(m.a, m.b) <= GEOMETRY_EPS * spread:
        raise DegenerateGeometryError("weighted points coincide; the rotation is undefined")
    V = Vt.T
    correction = np.diag([1.0, np.sign(np.linalg.det(V @ U.T))])
    R = V @ correction @ U.T
    # snap onto SO(2) so the Se2 invariants hold to machine precision
    theta = np.arctan2(R[1, 0], R[0, 0])
    R = rot(theta)
    t = m.dst_centroid - R @ m.src_centroid
    condition = float(sigma[0] / sigma[1]) if sigma[1] > 0 else float("inf")
    ill_conditioned = condition > condition_limit
    if ill_conditioned:
        logger.debug(f"ill-conditioned pose solve: covariance condition number {condition:.3e}")
    return PoseSolution(Se2(R, t), condition, ill_conditioned, m.total_weight)


@dataclass(frozen=True, eq=False)
class PoseGradients:
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray


def solve_pose_backward(corr, grad_rotation=None, grad_translation=None, condition_limit=CONDITION_LIMIT):
    """Gradients of a scalar function of (R, t) with respect to src, dst and weights.

    grad_rotation is dL/dR (2x2) and grad_translation dL/dt (2,); either may be None.
    """
    solution = solve_pose(corr, condition_limit)
    if solution.ill_conditioned:
        raise GradientUnavailableError(
            f"pose solve is ill-conditioned (condition number {solution.condition:.3e}); gradient unavailable"
        )
    m = _moments(corr)
    theta = solution.pose.theta
    g_R = np.zeros((2, 2)) if grad_rotation is None else np.asarray(grad_rotation, dtype=np.float64)
    g_t = np.zeros(2) if grad_translation is None else np.asarray(grad_translation, dtype=np.float64)
    R = rot(theta)
    dR = rot_derivative(theta)

    # t = dst_centroid - R(theta) src_centroid
    g_dst_centroid = g_t
    g_src_centroid = -R.T @ g_t
    g_theta = float(np.sum(g_R * dR)) - float(g_t @ (dR @ m.src_centroid))

    a, b = m.a, m.b
    norm2 = a * a + b * b
    g_a = -b / norm2 * g_theta
    g_b = a / norm2 * g_theta

    w = corr.weights
    x, y = m.src_centred, m.dst_centred
    # centring contributes nothing: sum_i of these terms vanishes with the centred sums
    g_x = w[:, None] * (g_a * y + g_b * (y @ J.T))
    g_y = w[:, None] * (g_a * x + g_b * (x @ J))
    W = m.total_weight
    g_src = g_x + (w / W)[:, None] * g_src_centroid
    g_dst = g_y + (w / W)[:, None] * g_dst_centroid
    cross = x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0]
    g_w = g_a * np.sum(x * y, axis=1) + g_b * cross + (x @ g_src_centroid + y @ g_dst_centroid) / W
    return PoseGradients(g_src, g_dst, g_w)


@dataclass(frozen=True)
class PoseLoss:
    value: float
    alpha: float
    translation_error: float
    rotation_error: float


def pose_loss(est, gt, alpha=10.0):
    """|t_est - t_gt| + alpha * |R_est R_gt^T - I|_F."""
    translation_error = float(np.linalg.norm(est.translation - gt.translation))
    rotation_error = float(np.linalg.norm(est.rotation @ gt.rotation.T - np.eye(2)))
    return PoseLoss(translation_error + alpha * rotation_error, alpha, translation_error, rotation_error)


def pose_loss_backward(est, gt, alpha=10.0):
    """(dL/dR_est, dL/dt_est); zero at the minimum of either term."""
    delta = est.translation - gt.translation
    norm = np.linalg.norm(delta)
    g_t = delta / norm if norm > LOSS_NORM_EPS else np.zeros(2)
    M = est.rotation @ gt.rotation.T - np.eye(2)
    norm = np.linalg.norm(M)
    g_R = alpha * (M / norm) @ gt.rotation if norm > LOSS_NORM_EPS else np.zeros((2, 2))
    return g_R, g_t


def weighted_sse(pose, corr):
    residual = pose.apply(corr.src) - corr.dst
    return float(np.sum(corr.weights * np.sum(residual**2, axis=1)))
