"""Pose initialization and test-time fine registration of two views."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import se3
from .errors import DataError, InvalidArgumentError, MissingFileError, NonFiniteObjectiveError
from .imaging import Image, Volume
from .objective import ncc_loss, objective_gradient, view_loss
from .projector import DetectorGeometry, render
from .se3 import Pose, TwistDistribution

CONVERGENCE_WINDOW = 20
CONVERGENCE_RTOL = 1e-6
# Orthonormality slack accepted from external pose files before projection.
EXTERNAL_POSE_TOL = 1e-6


@dataclass(frozen=True)
class RefineConfig:
    lr_rotation: float = 7e-3
    lr_translation: float = 7.0
    iterations: int = 500
    weight_low_ncc: float = 0.8
    weight_high_ncc: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    fd_step: float = 1e-4
    # False gives the larger weight to the better-aligned view instead.
    focus_worse_view: bool = True
    output: str = "attenuation"

    def __post_init__(self):
        if not (self.lr_rotation > 0 and self.lr_translation > 0 and self.fd_step > 0):
            raise InvalidArgumentError("learning rates and fd_step must be positive")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise InvalidArgumentError("iterations must be a non-negative integer")
        if not 0.0 <= self.weight_low_ncc <= 1.0:
            raise InvalidArgumentError("weight_low_ncc must lie in [0, 1]")
        if abs(self.weight_low_ncc + self.weight_high_ncc - 1.0) > 1e-12:
            raise InvalidArgumentError("view weights must sum to 1")

    @property
    def learning_rates(self) -> np.ndarray:
        return np.array([self.lr_translation] * 3 + [self.lr_rotation] * 3)

    @classmethod
    def from_dict(cls, obj: dict) -> RefineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> RefineConfig:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"no such file: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc


@dataclass
class RegistrationResult:
    initial_poses: list
    refined_poses: list
    loss_trace: list = field(default_factory=list)
    ncc_trace: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    best_iteration: int = 0
    best_objective: float = float("nan")
    initial_objective: float = float("nan")

    def to_json(self) -> dict:
        return {
            "initial": [se3.pose_to_json(p) for p in self.initial_poses],
            "refined": [se3.pose_to_json(p) for p in self.refined_poses],
            "loss_trace": [float(x) for x in self.loss_trace],
            "ncc_trace": [[float(v) for v in row] for row in self.ncc_trace],
            "iterations_run": int(self.iterations_run),
            "converged": bool(self.converged),
        }


class Adam:
    """Adam with a per-component learning-rate vector applied after normalization."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = np.asarray(lr, dtype=float)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


# ---------------------------------------------------------------- initializers


def init_perturbed(true_pose: Pose, dist: TwistDistribution, rng_seed: int) -> Pose:
    """Stand-in for a coarse estimate: the true pose under a sampled left perturbation."""
    return se3.compose(se3.exp(se3.sample_twist(dist, rng_seed)), true_pose)


def init_offset(true_pose: Pose, translation_mm: float, rotation_rad: float, rng_seed: int) -> Pose:
    """The true pose under a perturbation of fixed size in a random direction.

    The twist has translation part ``translation_mm * a`` and rotation part
    ``rotation_rad * b`` with unit vectors ``a, b`` drawn from ``rng_seed``.
    """
    rng = np.random.Generator(np.random.Philox(int(rng_seed)))
    a, b = rng.normal(size=(2, 3))
    twist = np.concatenate([translation_mm * a / np.linalg.norm(a), rotation_rad * b / np.linalg.norm(b)])
    return se3.compose(se3.exp(twist), true_pose)


def init_multistart(vol: Volume, geom: DetectorGeometry, fixed_image: Image, base_pose: Pose,
                    dist: TwistDistribution, n_starts: int, rng_seed: int,
                    include_base: bool = False, output: str = "attenuation") -> Pose:
    """Best-NCC pose among sampled perturbations of ``base_pose``.

    Ties go to the lowest sample index; with ``include_base`` the base pose is
    candidate 0.
    """
    if n_starts < 1:
        raise InvalidArgumentError("n_starts must be >= 1")
    twists = list(se3.sample_twists(dist, rng_seed, n_starts))
    if include_base:
        twists.insert(0, np.zeros(6))
    candidates = [se3.compose(se3.exp(t), base_pose) for t in twists]
    if len(candidates) == 1:
        ncc_loss(fixed_image, fixed_image)  # still rejects a degenerate target
        return candidates[0]
    losses = [ncc_loss(fixed_image, render(vol, geom, c, output)) for c in candidates]
    return candidates[int(np.argmin(losses))]


def _project_rigid(m: np.ndarray, index: int) -> Pose:
    m = np.asarray(m, dtype=float)
    if m.shape == (16,):
        m = m.reshape(4, 4)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise DataError(f"pose {index}: expected a finite 4x4 matrix")
    if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > EXTERNAL_POSE_TOL:
        raise DataError(f"pose {index}: last row must be [0, 0, 0, 1]")
    r = m[:3, :3]
    if np.linalg.det(r) <= 0:
        raise DataError(f"pose {index}: rotation has non-positive determinant")
    if np.max(np.abs(r.T @ r - np.eye(3))) > EXTERNAL_POSE_TOL:
        raise DataError(f"pose {index}: rotation is not orthonormal within {EXTERNAL_POSE_TOL}")
    u, _, vt = np.linalg.svd(r)
    return Pose(u @ vt, m[:3, 3])


def load_external_poses(path) -> list:
    """Read a JSON list of 4x4 pose matrices, projecting each rotation onto SO(3)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(obj, dict) and "poses" in obj:
        obj = obj["poses"]
    if isinstance(obj, dict) and "matrix" in obj:
        obj = [obj]
    if not isinstance(obj, list) or not obj:
        raise DataError(f"{path}: expected a non-empty list of poses")
    poses = []
    for i, item in enumerate(obj):
        m = item["matrix"] if isinstance(item, dict) else item
        try:
            poses.append(_project_rigid(np.asarray(m, dtype=float), i))
        except (TypeError, ValueError) as exc:
            raise DataError(f"pose {i}: {exc}") from exc
    return poses


def save_poses(poses: Sequence[Pose], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([se3.pose_to_json(p) for p in poses], indent=2))
    return path


# ---------------------------------------------------------------- refinement


def assign_view_weights(ncc_values: Sequence[float], cfg: RefineConfig = RefineConfig()):
    """Give ``weight_low_ncc`` to the worse-aligned (lower NCC) view; ties split evenly."""
    a, b = (float(x) for x in ncc_values)
    if a == b:
        return (0.5, 0.5)
    low, high = cfg.weight_low_ncc, cfg.weight_high_ncc
    if not cfg.focus_worse_view:
        low, high = high, low
    return (low, high) if a < b else (high, low)


def _converged(trace) -> bool:
    if len(trace) <= CONVERGENCE_WINDOW:
        return False
    ref = trace[-1 - CONVERGENCE_WINDOW]
    return abs(trace[-1] - ref) <= CONVERGENCE_RTOL * max(abs(ref), 1e-300)


def _optimize(n_params, view_losses, view_grads, cfg: RefineConfig, poses_at):
    """Shared Adam loop.

    ``view_losses(x)`` returns per-view ``1 - ncc`` at parameters ``x``;
    ``view_grads(x, weights)`` returns the gradient of the weighted objective.
    Returns (best x, trace, ncc trace, best iteration, best objective, initial objective).
    """
    x = np.zeros(n_params)
    opt = Adam(np.tile(cfg.learning_rates, n_params // 6), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    trace, ncc_trace = [], []
    best_x, best_obj, best_it = x.copy(), math.inf, 0
    initial = math.nan

    def evaluate(x):
        losses = view_losses(x)
        weights = assign_view_weights([1.0 - l for l in losses], cfg)
        obj = float(sum(w * l for w, l in zip(weights, losses)))
        return losses, weights, obj

    for it in range(cfg.iterations):
        try:
            losses, weights, obj = evaluate(x)
            if not math.isfinite(obj):
                raise NonFiniteObjectiveError(f"objective is {obj} at iteration {it}")
            if it == 0:
                initial = obj
            trace.append(obj)
            ncc_trace.append([1.0 - l for l in losses])
            if obj < best_obj:
                best_x, best_obj, best_it = x.copy(), obj, it
            x = opt.step(x, view_grads(x, weights))
        except NonFiniteObjectiveError as exc:
            exc.partial = (best_x, trace, ncc_trace, best_it)
            raise
    if cfg.iterations > 0:
        _, _, obj = evaluate(x)
        if math.isfinite(obj) and obj < best_obj:
            best_x, best_obj, best_it = x.copy(), obj, cfg.iterations
    return best_x, trace, ncc_trace, best_it, best_obj, initial


def _check_inputs(geom: DetectorGeometry, fixed_images):
    if len(fixed_images) != 2:
        raise InvalidArgumentError("fine registration takes exactly two fixed images")
    for img in fixed_images:
        if img.data.shape != geom.shape:
            raise InvalidArgumentError(
                f"fixed image shape {img.data.shape} does not match detector {geom.shape}"
            )


def fine_register(vol: Volume, geom: DetectorGeometry, fixed_images: Sequence[Image],
                  init_poses: Sequence[Pose], cfg: RefineConfig = RefineConfig()) -> RegistrationResult:
    """Jointly refine two independent view poses by maximizing weighted NCC.

    View ``i`` is parameterized as ``exp(delta_i) @ init_i``; the best iterate
    is returned.
    """
    _check_inputs(geom, fixed_images)
    init = list(init_poses)
    h = cfg.fd_step

    def losses(x):
        return [view_loss(x[6 * i : 6 * i + 6], fixed_images[i], vol, geom, init[i], cfg.output) for i in range(2)]

    def grads(x, weights):
        g = np.zeros(12)
        for i in range(2):
            gi = objective_gradient(
                lambda ts, i=i: view_loss(ts[0], fixed_images[i], vol, geom, init[i], cfg.output),
                [x[6 * i : 6 * i + 6]],
                h,
            )[0]
            g[6 * i : 6 * i + 6] = weights[i] * gi
        return g

    def poses_at(x):
        return [se3.compose(se3.exp(x[6 * i : 6 * i + 6]), init[i]) for i in range(2)]

    return _run(12, losses, grads, cfg, poses_at, init)


def fine_register_coupled(vol: Volume, geom: DetectorGeometry, fixed_images: Sequence[Image],
                          init_pose_pa: Pose, t_trans: Pose,
                          cfg: RefineConfig = RefineConfig()) -> RegistrationResult:
    """Refine one shared twist for two views tied by a fixed inter-view transform.

    View 1 sits at ``exp(delta) @ init_pose_pa`` and view 2 at
    ``t_trans @ exp(delta) @ init_pose_pa``.
    """
    _check_inputs(geom, fixed_images)
    h = cfg.fd_step

    def poses_at(x):
        p1 = se3.compose(se3.exp(x), init_pose_pa)
        return [p1, se3.compose(t_trans, p1)]

    def losses(x):
        return [ncc_loss(img, render(vol, geom, p, cfg.output)) for img, p in zip(fixed_images, poses_at(x))]

    def grads(x, weights):
        def weighted(ts):
            return float(sum(w * l for w, l in zip(weights, losses(ts[0]))))

        return objective_gradient(weighted, [x], h)[0]

    return _run(6, losses, grads, cfg, poses_at, poses_at(np.zeros(6)))


def _run(n_params, losses, grads, cfg, poses_at, init) -> RegistrationResult:
    result = RegistrationResult(initial_poses=list(init), refined_poses=list(init))
    try:
        best_x, trace, ncc_trace, best_it, best_obj, initial = _optimize(n_params, losses, grads, cfg, poses_at)
    except NonFiniteObjectiveError as exc:
        best_x, trace, ncc_trace, best_it = exc.partial
        result.loss_trace, result.ncc_trace = trace, ncc_trace
        result.iterations_run = len(trace)
        if trace:
            result.refined_poses = poses_at(best_x)
            result.best_iteration = best_it
        exc.result = result
        raise
    result.refined_poses = poses_at(best_x) if cfg.iterations > 0 else list(init)
    result.loss_trace = trace
    result.ncc_trace = ncc_trace
    result.iterations_run = len(trace)
    result.converged = _converged(trace)
    result.best_iteration = best_it
    result.best_objective = best_obj if trace else math.nan
    result.initial_objective = initial
    return result
