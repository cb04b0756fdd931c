"""Landmark projection and registration accuracy metrics (mTRE, SMRSR)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import se3
from .errors import InvalidArgumentError, ProjectionError
from .imaging import LandmarkSet
from .projector import DetectorGeometry
from .se3 import Pose

DEFAULT_LAMBDA = 0.194
MIN_DEPTH = 1e-6
SUBMM_THRESHOLD = 1.0


def project_points(geom: DetectorGeometry, pose: Pose, points) -> np.ndarray:
    """Perspective projection of world points (N, 3) to detector pixels (N, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = se3.inverse(pose).apply(pts)
    depth = cam[:, 2]
    bad = np.nonzero(depth <= MIN_DEPTH)[0]
    if bad.size:
        raise ProjectionError(f"point {int(bad[0])} is at or behind the camera plane (depth {depth[bad[0]]:g})")
    scale = geom.source_to_detector / (depth * geom.pixel_spacing)
    pu, pv = geom.principal_point
    return np.stack([pu + cam[:, 0] * scale, pv + cam[:, 1] * scale], axis=1)


def project_landmark(geom: DetectorGeometry, pose: Pose, point) -> np.ndarray:
    return project_points(geom, pose, point)[0]


def _project_named(geom, pose, landmarks: LandmarkSet):
    try:
        return project_points(geom, pose, landmarks.points)
    except ProjectionError:
        for name, p in zip(landmarks.names, landmarks.points):
            try:
                project_points(geom, pose, p)
            except ProjectionError as exc:
                raise ProjectionError(f"landmark {name!r}: {exc}") from exc
        raise


def _homogeneous_residuals(geom, T, T_hat, landmarks):
    # |K [I|0] (E - E_hat) [L; 1]| with E the world-to-camera extrinsic.
    k = geom.intrinsic_matrix()
    e = se3.inverse(T).matrix - se3.inverse(T_hat).matrix
    hom = np.hstack([landmarks.points, np.ones((len(landmarks), 1))])
    return np.linalg.norm((k @ (e @ hom.T)[:3]).T, axis=1)


def mtre(geom: DetectorGeometry, true_poses: Sequence[Pose], est_poses: Sequence[Pose], landmarks: LandmarkSet,
         lambda_mm_per_px: float = DEFAULT_LAMBDA, literal: bool = False) -> float:
    """Mean projected landmark distance over both views and all landmarks, in mm.

    ``lambda_mm_per_px`` converts pixel distances to millimeters. ``literal``
    replaces projected-point distances with the norm of the homogeneous
    difference ``K (T - T_hat) [L; 1]``, which has no perspective divide.
    """
    if len(true_poses) != len(est_poses) or not true_poses:
        raise InvalidArgumentError("need matching, non-empty lists of true and estimated poses")
    dists = []
    for T, T_hat in zip(true_poses, est_poses):
        if literal:
            dists.append(_homogeneous_residuals(geom, T, T_hat, landmarks))
        else:
            a = _project_named(geom, T, landmarks)
            b = _project_named(geom, T_hat, landmarks)
            dists.append(np.linalg.norm(a - b, axis=1))
    return float(lambda_mm_per_px * np.mean(np.concatenate(dists)))


def smrsr(mtres: Sequence[float]) -> float:
    """Percentage of cases with mTRE strictly below 1 mm."""
    vals = np.asarray(list(mtres), dtype=float)
    if vals.size == 0:
        raise InvalidArgumentError("smrsr needs at least one mTRE value")
    return 100.0 * float(np.count_nonzero(vals < SUBMM_THRESHOLD)) / vals.size


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)  # [(case id, mtre_mm)]
    lambda_mm_per_px: float = DEFAULT_LAMBDA
    failures: list = field(default_factory=list)  # [(case id, message)]

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    @property
    def values(self) -> np.ndarray:
        return np.array([m for _, m in self.cases], dtype=float)

    @property
    def mean_mtre(self) -> float:
        return float(np.mean(self.values)) if self.cases else float("nan")

    @property
    def stddev_mtre(self) -> float:
        # Population form (divide by n).
        return float(np.std(self.values)) if self.cases else float("nan")

    @property
    def smrsr_percent(self) -> float:
        return smrsr(self.values) if self.cases else float("nan")

    def summary(self) -> str:
        return f"{self.mean_mtre:.2f} ± {self.stddev_mtre:.2f}, {self.smrsr_percent:.0f}%"

    def to_json(self) -> dict:
        return {
            "cases": [{"id": cid, "mtre_mm": float(m)} for cid, m in self.cases],
            "mean_mtre": self.mean_mtre,
            "stddev_mtre": self.stddev_mtre,
            "smrsr_percent": self.smrsr_percent,
            "n_cases": self.n_cases,
            "lambda": self.lambda_mm_per_px,
            "failures": [{"id": cid, "error": msg} for cid, msg in self.failures],
        }
