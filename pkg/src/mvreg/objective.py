"""Image similarity, pose losses and finite-difference gradients.

NCC enters every minimized loss as ``1 - ncc`` so that all losses vanish at
perfect alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import se3
from .errors import DegenerateImageError, InvalidArgumentError, NonFiniteObjectiveError
from .imaging import Image, Volume
from .projector import DetectorGeometry, render
from .se3 import Pose

# Loss assigned to a rendered image with no intensity variation.
WORST_NCC_LOSS = 2.0


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.7
    beta2: float = 0.3
    gamma: float = 1e-2

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise InvalidArgumentError("beta1, beta2 must be >= 0 with a positive sum")
        if self.gamma < 0:
            raise InvalidArgumentError("gamma must be >= 0")


def image_stats(img: Image):
    """Population mean and standard deviation."""
    d = img.data
    mu = float(d.mean())
    return mu, float(np.sqrt(np.mean((d - mu) ** 2)))


def _standardize(img: Image, which: str) -> np.ndarray:
    mu, sd = image_stats(img)
    if not sd > 0:
        raise DegenerateImageError(f"{which} image is constant")
    return (img.data - mu) / sd


def ncc(a: Image, b: Image) -> float:
    """Normalized cross-correlation in [-1, 1], averaged over pixels."""
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    za = _standardize(a, "first")
    zb = _standardize(b, "second")
    return float(np.mean(za * zb))


def ncc_loss(fixed: Image, moving: Image) -> float:
    """``1 - ncc``; a constant moving image scores :data:`WORST_NCC_LOSS`.

    A constant fixed image is an input error and still raises.
    """
    zf = _standardize(fixed, "fixed")
    if fixed.data.shape != moving.data.shape:
        raise InvalidArgumentError(f"image shapes differ: {fixed.data.shape} vs {moving.data.shape}")
    mu, sd = image_stats(moving)
    if not sd > 0:
        return WORST_NCC_LOSS
    return 1.0 - float(np.mean(zf * ((moving.data - mu) / sd)))


@dataclass(frozen=True, eq=False)
class ViewPair:
    """Two views sharing one volume.

    Estimated poses are carried as twists relative to ``base_pose``, i.e. view
    ``i`` sits at ``exp(estimated[i]) @ base_pose``, the form a pose regressor
    produces. ``true_poses`` are needed only by the pose-distance terms.
    """

    fixed_images: tuple
    estimated: tuple
    eps: np.ndarray
    base_pose: Pose = None
    true_poses: tuple = None

    def __post_init__(self):
        if len(self.fixed_images) != 2 or len(self.estimated) != 2:
            raise InvalidArgumentError("a view pair needs exactly two images and two estimates")
        a, b = self.fixed_images
        if a.data.shape != b.data.shape or a.pixel_spacing != b.pixel_spacing:
            raise InvalidArgumentError("both fixed images must share dimensions and pixel spacing")
        object.__setattr__(self, "estimated", tuple(se3.as_twist(e) for e in self.estimated))
        object.__setattr__(self, "eps", se3.as_twist(self.eps))
        if self.base_pose is None:
            object.__setattr__(self, "base_pose", Pose.identity())
        if self.true_poses is not None and len(self.true_poses) != 2:
            raise InvalidArgumentError("true_poses must hold two poses")

    @classmethod
    def from_poses(cls, fixed_images, estimated_poses, eps, base_pose=None, true_poses=None) -> ViewPair:
        base = Pose.identity() if base_pose is None else base_pose
        inv = se3.inverse(base)
        est = tuple(se3.log(se3.compose(p, inv)) for p in estimated_poses)
        return cls(tuple(fixed_images), est, eps, base, true_poses)

    def pose_at(self, twist) -> Pose:
        return se3.compose(se3.exp(twist), self.base_pose)

    @property
    def estimated_poses(self):
        return tuple(self.pose_at(e) for e in self.estimated)

    def cross_poses(self):
        """Each view's pose predicted from the other view's estimate and ``eps``."""
        v1, v2 = self.estimated
        return (
            self.pose_at(se3.cross_twist(v2, self.eps, "backward")),
            self.pose_at(se3.cross_twist(v1, self.eps, "forward")),
        )

    def _require_truth(self):
        if self.true_poses is None:
            raise InvalidArgumentError("this loss needs true poses")
        return self.true_poses


def _literal_cross_geodesic(T: Pose, T_tilde: Pose, f: float) -> float:
    # Log(T @ T_tilde) without the inverse, as the cross-term formula is printed.
    angle = se3.rotation_angle(T.rotation.T @ T_tilde.rotation)
    dt = float(np.linalg.norm(T.translation - T_tilde.translation))
    return math.sqrt(f**2 / 4.0 * angle**2 + dt) + float(np.linalg.norm(se3.log(se3.compose(T, T_tilde))))


def local_loss(pair: ViewPair, vol: Volume, geom: DetectorGeometry, w: LossWeights = LossWeights(),
               output: str = "attenuation") -> float:
    truth = pair._require_truth()
    f = geom.focal_length
    total = 0.0
    for img, T, T_hat in zip(pair.fixed_images, truth, pair.estimated_poses):
        total += w.gamma * se3.geodesic_distance(T, T_hat, f)
        total += ncc_loss(img, render(vol, geom, T_hat, output))
    return total


def cross_loss(pair: ViewPair, vol: Volume, geom: DetectorGeometry, w: LossWeights = LossWeights(),
               output: str = "attenuation", literal_log: bool = False) -> float:
    """Pose and image penalties on the poses predicted across views.

    With ``literal_log`` the pose term uses ``log(T_i @ T_tilde_i)`` instead of
    the relative pose ``log(T_i^-1 @ T_tilde_i)``.
    """
    truth = pair._require_truth()
    f = geom.focal_length
    total = 0.0
    for img, T, T_tilde in zip(pair.fixed_images, truth, pair.cross_poses()):
        if literal_log:
            total += w.gamma * _literal_cross_geodesic(T, T_tilde, f)
        else:
            total += w.gamma * se3.geodesic_distance(T, T_tilde, f)
        total += ncc_loss(img, render(vol, geom, T_tilde, output))
    return total


def total_loss(pair: ViewPair, vol: Volume, geom: DetectorGeometry, w: LossWeights = LossWeights(),
               output: str = "attenuation") -> float:
    local = local_loss(pair, vol, geom, w, output) if w.beta1 > 0 else 0.0
    cross = cross_loss(pair, vol, geom, w, output) if w.beta2 > 0 else 0.0
    return w.beta1 * local + w.beta2 * cross


def view_loss(twist, fixed: Image, vol: Volume, geom: DetectorGeometry, base_pose: Pose,
              output: str = "attenuation") -> float:
    """``1 - ncc`` of one view rendered at ``exp(twist) @ base_pose``."""
    pose = se3.compose(se3.exp(twist), base_pose)
    return ncc_loss(fixed, render(vol, geom, pose, output))


def refine_objective(estimated: Sequence, fixed_images: Sequence[Image], vol: Volume, geom: DetectorGeometry,
                     view_weights: Sequence[float], base_poses: Sequence[Pose],
                     output: str = "attenuation") -> float:
    """Weighted sum of per-view ``1 - ncc``; needs no ground truth."""
    if not (len(estimated) == len(fixed_images) == len(view_weights) == len(base_poses)):
        raise InvalidArgumentError("one twist, image, weight and base pose per view")
    weights = np.asarray(view_weights, dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise InvalidArgumentError("view weights must be non-negative and sum to 1")
    return float(
        sum(
            wi * view_loss(d, img, vol, geom, base, output)
            for wi, d, img, base in zip(weights, estimated, fixed_images, base_poses)
        )
    )


def objective_gradient(f: Callable[[list], float], at: Sequence, step: float = 1e-4) -> list:
    """Central-difference gradient of ``f`` over a list of twists.

    Twelve evaluations per twist; ``(f(x + h e_j) - f(x - h e_j)) / 2h``.
    """
    if not step > 0:
        raise InvalidArgumentError("finite-difference step must be positive")
    point = [se3.as_twist(v) for v in at]
    grads = []
    for t, v in enumerate(point):
        g = np.zeros(6)
        for j in range(6):
            vals = []
            for sign in (1.0, -1.0):
                probe = [p.copy() for p in point]
                probe[t][j] = v[j] + sign * step
                val = float(f(probe))
                if not math.isfinite(val):
                    raise NonFiniteObjectiveError(
                        f"objective is {val} at twist {t} component {j}", component=(t, j)
                    )
                vals.append(val)
            g[j] = (vals[0] - vals[1]) / (2.0 * step)
        grads.append(g)
    return grads
