"""Planar rigid transforms (SE(2))."""

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError

ORTHONORMAL_TOL = 1e-9


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rot_derivative(theta):
    """d rot(theta) / d theta."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]], dtype=np.float64)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _frozen(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Se2:
    """Rotation R in SO(2) and translation t in metres; apply(q) = R q + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(2)
        if R.shape != (2, 2):
            raise DataError(f"Se2 rotation must be 2x2, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DataError("Se2 has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(2))) > ORTHONORMAL_TOL:
            raise DataError("Se2 rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise DataError("Se2 rotation has det != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_xytheta(cls, x, y, theta):
        return cls(rot(theta), np.array([x, y], dtype=np.float64))

    @classmethod
    def from_vector(cls, vector):
        x, y, theta = np.asarray(vector, dtype=np.float64)
        return cls.from_xytheta(x, y, theta)

    @property
    def theta(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def x(self):
        return float(self.translation[0])

    @property
    def y(self):
        return float(self.translation[1])

    def to_vector(self):
        """(x, y, theta) with theta in (-pi, pi]."""
        return np.array([self.x, self.y, wrap_angle(self.theta)])

    def as_matrix(self):
        matrix = np.eye(3)
        matrix[:2, :2] = self.rotation
        matrix[:2, 2] = self.translation
        return matrix

    def compose(self, other):
        """self ∘ other: apply other first."""
        R = self.rotation @ other.rotation
        # re-orthonormalise so long chains stay inside SO(2)
        theta = np.arctan2(R[1, 0], R[0, 0])
        return Se2(rot(theta), self.rotation @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation.T
        return Se2(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return f"Se2(x={self.x:.6g}, y={self.y:.6g}, theta={self.theta:.6g})"


def se2_compose(a, b):
    return a.compose(b)


def se2_inverse(transform):
    return transform.inverse()


def se2_apply(transform, points):
    return transform.apply(points)


def se2_distance(a, b):
    """Translation norm and absolute angle of a⁻¹∘b."""
    delta = a.inverse().compose(b)
    return float(np.linalg.norm(delta.translation)), abs(wrap_angle(delta.theta))
