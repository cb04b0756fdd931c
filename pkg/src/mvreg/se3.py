"""Rigid-body arithmetic on SE(3) and its Lie algebra se(3).

Twists are plain float64 arrays of shape (6,) laid out as
``[rho_x, rho_y, rho_z, phi_x, phi_y, phi_z]``: translation generator in mm
first, rotation generator (axis-angle, radians) second. Poses are immutable
:class:`Pose` values holding a rotation matrix and a translation vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BranchAmbiguityError, InvalidArgumentError

ORTHO_TOL = 1e-9
# log() refuses rotation angles closer than this to pi.
BRANCH_MARGIN = 1e-6
# Below this angle the trig ratios switch to their Taylor series.
SMALL_ANGLE = 1e-4
# Sampled twists are snapped to this dyadic grid so that sums and differences
# of twists of moderate magnitude are exact in float64.
TWIST_QUANTUM = 2.0**-40


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=float)


def as_twist(v) -> np.ndarray:
    """Validate and copy a 6-vector into a twist array."""
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.shape != (6,):
        raise InvalidArgumentError(f"twist must have 6 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("twist components must be finite")
    return arr


def make_twist(rho=(0.0, 0.0, 0.0), phi=(0.0, 0.0, 0.0)) -> np.ndarray:
    return as_twist(np.concatenate([np.asarray(rho, float), np.asarray(phi, float)]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``.

    Used as a camera-to-world map throughout: the camera origin (X-ray source)
    lands at ``translation``.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidArgumentError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidArgumentError("last row of a pose matrix must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(np.eye(3), t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points of shape (..., 3) through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None

    def __repr__(self):
        return f"Pose(matrix={self.matrix.tolist()})"


@dataclass(frozen=True, eq=False)
class TwistDistribution:
    """Independent per-dimension Gaussian over twists."""

    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mu = as_twist(self.mean)
        sd = as_twist(self.stddev)
        if np.any(sd <= 0.0):
            raise InvalidArgumentError("stddev components must be strictly positive")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "stddev", sd)

    def __eq__(self, other):
        if not isinstance(other, TwistDistribution):
            return NotImplemented
        return bool(np.array_equal(self.mean, other.mean) and np.array_equal(self.stddev, other.stddev))

    __hash__ = None

    @classmethod
    def isotropic(cls, translation_sd: float, rotation_sd: float, mean=None) -> TwistDistribution:
        mu = np.zeros(6) if mean is None else mean
        return cls(mu, [translation_sd] * 3 + [rotation_sd] * 3)


def _series_coeffs(theta: float):
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 stable near zero."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        return a, b, c
    s = math.sin(theta)
    half = math.sin(theta / 2.0)
    # 1 - cos(t) = 2 sin^2(t/2) avoids cancellation at small angles.
    return s / theta, 2.0 * half * half / theta**2, (theta - s) / theta**3


def exp(v) -> Pose:
    """Exponential map se(3) -> SE(3) in closed form."""
    v = as_twist(v)
    rho, phi = v[:3], v[3:]
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    k2 = k @ k
    a, b, c = _series_coeffs(theta)
    rot = np.eye(3) + a * k + b * k2
    vmat = np.eye(3) + b * k + c * k2
    return Pose(rot, vmat @ rho)


def rotation_angle(rot: np.ndarray) -> float:
    """Angle of a rotation matrix, accurate near both 0 and pi."""
    w = vee(rot - rot.T) / 2.0
    cos_t = (np.trace(rot) - 1.0) / 2.0
    return math.atan2(float(np.linalg.norm(w)), float(cos_t))


def log(T: Pose) -> np.ndarray:
    """Logarithm map SE(3) -> se(3) on the principal branch."""
    if not isinstance(T, Pose):
        T = Pose.from_matrix(T)
    rot = T.rotation
    w = vee(rot - rot.T) / 2.0
    sin_t = float(np.linalg.norm(w))
    cos_t = (float(np.trace(rot)) - 1.0) / 2.0
    theta = math.atan2(sin_t, cos_t)
    if theta > math.pi - BRANCH_MARGIN:
        raise BranchAmbiguityError(f"rotation angle {theta!r} is too close to pi")
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        phi = w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        phi = w * (theta / sin_t)
        half = theta / 2.0
        d = (1.0 - half / math.tan(half)) / (theta * theta)
    k = skew(phi)
    vinv = np.eye(3) - 0.5 * k + d * (k @ k)
    return np.concatenate([vinv @ T.translation, phi])


def compose(a: Pose, b: Pose) -> Pose:
    """Matrix product ``a @ b``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: Pose) -> Pose:
    rt = T.rotation.T
    return Pose(rt, -(rt @ T.translation))


def relative(a: Pose, b: Pose) -> Pose:
    """``inverse(a) @ b``."""
    return compose(inverse(a), b)


def _quantize(v: np.ndarray) -> np.ndarray:
    return np.round(v / TWIST_QUANTUM) * TWIST_QUANTUM


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_twists(dist: TwistDistribution, rng_seed: int, n: int) -> np.ndarray:
    """Draw ``n`` twists as an (n, 6) array."""
    z = _rng(rng_seed).standard_normal((n, 6))
    return _quantize(dist.mean + dist.stddev * z)


def sample_twist(dist: TwistDistribution, rng_seed: int) -> np.ndarray:
    return sample_twists(dist, rng_seed, 1)[0]


def sample_second_view(eps1, dist: TwistDistribution, rng_seed: int):
    """Draw the inter-view twist ``eps ~ N(0, 2 sd^2)`` and return ``(eps1 + eps, eps)``.

    ``eps2 - eps1 == eps`` holds bitwise. When ``eps1`` comes from
    :func:`sample_twist` all three twists sit on the quantization grid, so
    ``eps2 - eps == eps1`` is exact too.
    """
    eps1 = as_twist(eps1)
    z = _rng(rng_seed).standard_normal(6)
    eps2 = eps1 + _quantize(math.sqrt(2.0) * dist.stddev * z)
    # No-op for on-grid eps1; otherwise keeps eps2 - eps1 == eps bitwise.
    return eps2, eps2 - eps1


def geodesic_distance(T: Pose, T_hat: Pose, focal_length: float) -> float:
    """Pose discrepancy combining a focal-scaled angle, translation and twist norm.

    ``sqrt(f^2/4 * angle^2 + |t - t_hat|) + |log(T^-1 T_hat)|``. The translation
    norm enters the square root unsquared.
    """
    if not focal_length > 0:
        raise InvalidArgumentError("focal_length must be positive")
    rel = relative(T, T_hat)
    # Equal to arccos((tr(R^T R_hat) - 1) / 2) with the argument clamped to
    # [-1, 1], but exact at the identity.
    angle = rotation_angle(rel.rotation)
    dt = float(np.linalg.norm(T.translation - T_hat.translation))
    head = math.sqrt(focal_length**2 / 4.0 * angle**2 + dt)
    return head + float(np.linalg.norm(log(rel)))


def cross_pose(T_other: Pose, eps, direction: str) -> Pose:
    """Predict one view's pose from the other's via the inter-view twist.

    ``backward`` gives ``exp(log(T_other) - eps)``, ``forward`` gives
    ``exp(log(T_other) + eps)``.
    """
    return exp(cross_twist(log(T_other), eps, direction))


def cross_twist(v_other, eps, direction: str) -> np.ndarray:
    v_other, eps = as_twist(v_other), as_twist(eps)
    if direction == "forward":
        return v_other + eps
    if direction == "backward":
        return v_other - eps
    raise InvalidArgumentError(f"direction must be 'forward' or 'backward', got {direction!r}")


def _exact_sincos(theta: float):
    # Snap to exact values at multiples of pi/2 so the 0/+-1 entries are exact.
    q = theta / (math.pi / 2.0)
    n = round(q)
    if abs(q - n) < 1e-15:
        return [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][n % 4]
    return math.sin(theta), math.cos(theta)


def rotation_z(theta: float) -> np.ndarray:
    s, c = _exact_sincos(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pa_to_lat_transform(theta: float, voxel_extent: Sequence[float]) -> Pose:
    """Fixed inter-view transform written with the volume extent ``(x, y, z)``.

    Rotation by ``theta`` about z with translation ``(x + y sin, y - x sin, 0)``.
    This literal form is not the identity at ``theta = 0``; see
    :func:`recentered_rotation` for the exact rotation about a center point.
    """
    theta = float(theta)
    if not -math.pi <= theta <= math.pi:
        raise InvalidArgumentError("theta must lie in [-pi, pi]")
    x, y, z = (float(e) for e in voxel_extent)
    if min(x, y, z) <= 0:
        raise InvalidArgumentError("voxel extent components must be positive")
    s, _ = _exact_sincos(theta)
    return Pose(rotation_z(theta), [x + y * s, y - x * s, 0.0])


def recentered_rotation(theta: float, center: Sequence[float]) -> Pose:
    """Rotation by ``theta`` about the z-parallel axis through ``center``.

    Equals ``T(c) R(theta) T(-c)``; identity at ``theta = 0``. At ``pi/2`` the
    literal :func:`pa_to_lat_transform` is a rotation about the point ``(x, y)``,
    so the two agree when that form is given ``c`` itself.
    """
    theta = float(theta)
    if not -math.pi <= theta <= math.pi:
        raise InvalidArgumentError("theta must lie in [-pi, pi]")
    c = np.asarray(center, dtype=float)
    rot = rotation_z(theta)
    return Pose(rot, c - rot @ c)


def pose_to_json(T: Pose) -> dict:
    return {"matrix": [float(x) for x in T.matrix.reshape(-1)]}


def pose_from_json(obj) -> Pose:
    if isinstance(obj, dict):
        obj = obj.get("matrix")
    if obj is None or len(obj) != 16:
        raise InvalidArgumentError("pose JSON needs a 16-number 'matrix'")
    return Pose.from_matrix(np.asarray(obj, dtype=float).reshape(4, 4))


def twist_to_json(v) -> list:
    return [float(x) for x in as_twist(v)]
