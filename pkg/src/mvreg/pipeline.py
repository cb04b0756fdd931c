"""Synthetic registration studies: generate cases, register them, aggregate metrics."""

from __future__ import annotations

import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se3
from .errors import DataError, InvalidArgumentError, MissingFileError, MvregError
from .evaluation import DEFAULT_LAMBDA, MetricReport, mtre
from .imaging import Image, LandmarkSet, Volume, load_landmarks, load_volume, make_phantom, normalize_image
from .projector import DetectorGeometry, pa_pose, render
from .register import (
    RefineConfig,
    fine_register,
    fine_register_coupled,
    init_multistart,
    init_offset,
    init_perturbed,
    load_external_poses,
)
from .se3 import Pose, TwistDistribution

MODES = ("temporal", "spatial")
INITIALIZERS = ("truth", "perturbed", "offset", "multistart", "external")
INTER_VIEW_FORMS = ("recentered", "literal")

# Sub-stream labels for per-case random draws.
_STREAM_EPS1, _STREAM_EPS, _STREAM_INIT = 1, 2, 3


def _dist_from_json(obj, default=None) -> TwistDistribution:
    if obj is None:
        return default
    mean = obj.get("mean", [0.0] * 6)
    return TwistDistribution(mean, obj["stddev"])


def _dist_to_json(d: TwistDistribution) -> dict:
    return {"mean": [float(x) for x in d.mean], "stddev": [float(x) for x in d.stddev]}


@dataclass(frozen=True)
class ExperimentSpec:
    geometry: DetectorGeometry
    case_distribution: TwistDistribution
    n_cases: int = 1
    mode: str = "temporal"
    phantom_kind: str = "sphere_pair"
    phantom_dims: tuple = (64, 64, 64)
    phantom_spacing: tuple = (2.0, 2.0, 2.0)
    phantom_seed: int = 0
    volume_path: str = None
    landmarks_path: str = None
    source_to_isocenter: float = 600.0
    initializer: str = "perturbed"
    init_distribution: TwistDistribution = None
    n_starts: int = 16
    offset_translation_mm: float = 5.0
    offset_rotation_rad: float = math.radians(5.0)
    external_poses_path: str = None
    refine: RefineConfig = field(default_factory=RefineConfig)
    rng_seed: int = 0
    lambda_mm_per_px: float = DEFAULT_LAMBDA
    theta: float = math.pi / 2
    inter_view: str = "recentered"

    def __post_init__(self):
        if self.n_cases < 1:
            raise InvalidArgumentError("n_cases must be >= 1")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if self.initializer not in INITIALIZERS:
            raise InvalidArgumentError(f"initializer must be one of {INITIALIZERS}")
        if self.inter_view not in INTER_VIEW_FORMS:
            raise InvalidArgumentError(f"inter_view must be one of {INTER_VIEW_FORMS}")
        if self.initializer in ("perturbed", "multistart") and self.init_distribution is None:
            raise InvalidArgumentError(f"initializer {self.initializer!r} needs init_distribution")
        if self.initializer == "external":
            if self.external_poses_path is None or not Path(self.external_poses_path).exists():
                raise MissingFileError(f"external pose file not found: {self.external_poses_path}")
        if self.volume_path is not None and self.landmarks_path is None:
            raise InvalidArgumentError("a volume file needs a landmarks file")

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentSpec:
        try:
            phantom = obj.get("phantom", {})
            init = obj.get("initializer", {"kind": "perturbed"})
            return cls(
                geometry=DetectorGeometry.from_json(obj["geometry"]),
                case_distribution=_dist_from_json(obj["case_distribution"]),
                n_cases=int(obj.get("n_cases", 1)),
                mode=obj.get("mode", "temporal"),
                phantom_kind=phantom.get("kind", "sphere_pair"),
                phantom_dims=tuple(phantom.get("dims", (64, 64, 64))),
                phantom_spacing=tuple(phantom.get("spacing", (2.0, 2.0, 2.0))),
                phantom_seed=int(phantom.get("seed", 0)),
                volume_path=obj.get("volume"),
                landmarks_path=obj.get("landmarks"),
                source_to_isocenter=float(obj.get("source_to_isocenter", 600.0)),
                initializer=init.get("kind", "perturbed"),
                init_distribution=_dist_from_json(init.get("distribution")),
                n_starts=int(init.get("n_starts", 16)),
                offset_translation_mm=float(init.get("translation_mm", 5.0)),
                offset_rotation_rad=float(init.get("rotation_rad", math.radians(5.0))),
                external_poses_path=init.get("path"),
                refine=RefineConfig.from_dict(obj.get("refine", {})),
                rng_seed=int(obj.get("rng_seed", 0)),
                lambda_mm_per_px=float(obj.get("lambda_mm_per_px", DEFAULT_LAMBDA)),
                theta=float(obj.get("theta", math.pi / 2)),
                inter_view=obj.get("inter_view", "recentered"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MvregError):
                raise
            raise DataError(f"malformed experiment spec: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"no such file: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(obj)

    def to_json(self) -> dict:
        init = {
            "kind": self.initializer,
            "n_starts": self.n_starts,
            "translation_mm": self.offset_translation_mm,
            "rotation_rad": self.offset_rotation_rad,
            "path": self.external_poses_path,
        }
        if self.init_distribution is not None:
            init["distribution"] = _dist_to_json(self.init_distribution)
        return {
            "geometry": self.geometry.to_json(),
            "case_distribution": _dist_to_json(self.case_distribution),
            "n_cases": self.n_cases,
            "mode": self.mode,
            "phantom": {
                "kind": self.phantom_kind,
                "dims": list(self.phantom_dims),
                "spacing": list(self.phantom_spacing),
                "seed": self.phantom_seed,
            },
            "volume": self.volume_path,
            "landmarks": self.landmarks_path,
            "source_to_isocenter": self.source_to_isocenter,
            "initializer": init,
            "refine": {k: getattr(self.refine, k) for k in self.refine.__dataclass_fields__},
            "rng_seed": self.rng_seed,
            "lambda_mm_per_px": self.lambda_mm_per_px,
            "theta": self.theta,
            "inter_view": self.inter_view,
        }


@dataclass
class Case:
    case_id: int
    true_poses: list
    fixed_images: list
    eps1: np.ndarray
    eps: np.ndarray = None  # inter-view twist; None in spatial mode


def case_seed(rng_seed: int, case_index: int) -> int:
    return int(rng_seed) ^ int(case_index)


def _substream(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def load_subject(spec: ExperimentSpec):
    """The volume and landmarks an experiment runs on."""
    if spec.volume_path is not None:
        return load_volume(spec.volume_path), load_landmarks(spec.landmarks_path)
    return make_phantom(spec.phantom_kind, spec.phantom_dims, spec.phantom_spacing, spec.phantom_seed)


def base_pose(spec: ExperimentSpec, vol: Volume) -> Pose:
    return pa_pose(spec.source_to_isocenter, vol.center)


def inter_view_transform(spec: ExperimentSpec, vol: Volume) -> Pose:
    if spec.inter_view == "literal":
        return se3.pa_to_lat_transform(spec.theta, vol.extent)
    return se3.recentered_rotation(spec.theta, vol.center)


def generate_cases(spec: ExperimentSpec, vol: Volume = None) -> list:
    """Sample true view poses and render the fixed images for every case."""
    if vol is None:
        vol, _ = load_subject(spec)
    return [_make_case(spec, vol, i) for i in range(spec.n_cases)]


def _make_case(spec: ExperimentSpec, vol: Volume, index: int) -> Case:
    seed = case_seed(spec.rng_seed, index)
    t_pa = base_pose(spec, vol)
    eps1 = se3.sample_twist(spec.case_distribution, _substream(seed, _STREAM_EPS1))
    t1 = se3.compose(se3.exp(eps1), t_pa)
    if spec.mode == "temporal":
        eps2, eps = se3.sample_second_view(eps1, spec.case_distribution, _substream(seed, _STREAM_EPS))
        t2 = se3.compose(se3.exp(eps2), t_pa)
    else:
        eps = None
        t2 = se3.compose(inter_view_transform(spec, vol), t1)
    out = spec.refine.output
    images = [render(vol, spec.geometry, t, out) for t in (t1, t2)]
    return Case(index, [t1, t2], images, eps1, eps)


def _initial_poses(spec: ExperimentSpec, vol: Volume, case: Case, external) -> list:
    seed = _substream(case_seed(spec.rng_seed, case.case_id), _STREAM_INIT)
    n_views = 2 if spec.mode == "temporal" else 1
    if spec.initializer == "truth":
        return case.true_poses[:n_views]
    if spec.initializer == "perturbed":
        return [init_perturbed(case.true_poses[i], spec.init_distribution, seed + i) for i in range(n_views)]
    if spec.initializer == "offset":
        return [
            init_offset(case.true_poses[i], spec.offset_translation_mm, spec.offset_rotation_rad, seed + i)
            for i in range(n_views)
        ]
    if spec.initializer == "multistart":
        t_pa = base_pose(spec, vol)
        if spec.mode == "spatial":
            return [init_multistart(vol, spec.geometry, case.fixed_images[0], t_pa, spec.init_distribution,
                                    spec.n_starts, seed, output=spec.refine.output)]
        return [
            init_multistart(vol, spec.geometry, case.fixed_images[i], t_pa, spec.init_distribution,
                            spec.n_starts, seed + i, output=spec.refine.output)
            for i in range(2)
        ]
    start = case.case_id * n_views
    if len(external) < start + n_views:
        raise DataError(f"external pose file has no entry for case {case.case_id}")
    return external[start : start + n_views]


def run_case(spec: ExperimentSpec, vol: Volume, landmarks: LandmarkSet, case: Case, external=None) -> dict:
    """Initialize, refine and score one case."""
    init = _initial_poses(spec, vol, case, external)
    if spec.mode == "temporal":
        result = fine_register(vol, spec.geometry, case.fixed_images, init, spec.refine)
    else:
        result = fine_register_coupled(
            vol, spec.geometry, case.fixed_images, init[0], inter_view_transform(spec, vol), spec.refine
        )
    lam = spec.lambda_mm_per_px
    before = mtre(spec.geometry, case.true_poses, result.initial_poses, landmarks, lam)
    after = mtre(spec.geometry, case.true_poses, result.refined_poses, landmarks, lam)
    return {"id": case.case_id, "mtre_before": before, "mtre_after": after, "result": result}


def _case_worker(args):
    spec, index = args
    from . import projector

    projector.set_workers(1)
    vol, landmarks = load_subject(spec)
    external = load_external_poses(spec.external_poses_path) if spec.initializer == "external" else None
    return _run_one(spec, vol, landmarks, index, external)


def _run_one(spec, vol, landmarks, index, external):
    try:
        case = _make_case(spec, vol, index)
        return run_case(spec, vol, landmarks, case, external)
    except MvregError as exc:
        return {"id": index, "error": f"{type(exc).__name__}: {exc}"}


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class ExperimentOutcome:
    spec: ExperimentSpec
    before: MetricReport
    after: MetricReport
    cases: list

    @property
    def failures(self) -> list:
        return self.after.failures

    def to_json(self) -> dict:
        cases = []
        for c in self.cases:
            if "error" in c:
                cases.append({"id": c["id"], "error": c["error"]})
                continue
            r = c["result"]
            cases.append(
                {
                    "id": c["id"],
                    "mtre_before": c["mtre_before"],
                    "mtre_after": c["mtre_after"],
                    "iterations_run": r.iterations_run,
                    "converged": r.converged,
                    "best_iteration": r.best_iteration,
                    "initial_objective": _finite_or_none(r.initial_objective),
                    "best_objective": _finite_or_none(r.best_objective),
                    "initial": [se3.pose_to_json(p) for p in r.initial_poses],
                    "refined": [se3.pose_to_json(p) for p in r.refined_poses],
                }
            )
        return {
            "spec": self.spec.to_json(),
            "before": self.before.to_json(),
            "after": self.after.to_json(),
            "n_failures": len(self.failures),
            "cases": cases,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, allow_nan=True).encode()


def run_experiment(spec: ExperimentSpec, workers: int = 1, overlay_dir=None) -> ExperimentOutcome:
    """Run every case and aggregate before/after-refinement metrics.

    Failed cases are listed with their error and excluded from the aggregates.
    """
    vol, landmarks = load_subject(spec)
    external = load_external_poses(spec.external_poses_path) if spec.initializer == "external" else None
    if workers > 1 and spec.n_cases > 1:
        # Spawned, not forked: the parent's OpenMP runtime is not fork-safe.
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(workers, spec.n_cases), mp_context=ctx) as pool:
            results = list(pool.map(_case_worker, [(spec, i) for i in range(spec.n_cases)]))
    else:
        results = [_run_one(spec, vol, landmarks, i, external) for i in range(spec.n_cases)]
    lam = spec.lambda_mm_per_px
    before, after = MetricReport(lambda_mm_per_px=lam), MetricReport(lambda_mm_per_px=lam)
    for r in results:
        if "error" in r:
            before.failures.append((r["id"], r["error"]))
            after.failures.append((r["id"], r["error"]))
        else:
            before.cases.append((r["id"], r["mtre_before"]))
            after.cases.append((r["id"], r["mtre_after"]))
    outcome = ExperimentOutcome(spec, before, after, results)
    if overlay_dir is not None:
        write_overlays(outcome, vol, overlay_dir)
    return outcome


# ---------------------------------------------------------------- overlays


def gradient_magnitude(img: Image) -> np.ndarray:
    gy, gx = np.gradient(img.data)
    return np.hypot(gx, gy)


def blend(fixed: Image, moving: Image, alpha: float = 0.5) -> Image:
    a = normalize_image(fixed).data
    b = normalize_image(moving).data
    return Image((1.0 - alpha) * a + alpha * b, fixed.pixel_spacing)


def edge_overlay(fixed: Image, moving: Image) -> np.ndarray:
    """RGB uint8 image: fixed-image edges in cyan, moving-image edges in orange."""
    def edges(img):
        g = gradient_magnitude(img)
        top = g.max()
        return g / top if top > 0 else g

    ef, em = edges(fixed), edges(moving)
    rgb = np.zeros(fixed.data.shape + (3,))
    rgb[..., 0] = em
    rgb[..., 1] = np.clip(0.6 * em + ef, 0, 1)
    rgb[..., 2] = ef
    return np.round(rgb * 255).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.astype(np.uint8).tobytes())
    return path


def write_overlays(outcome: ExperimentOutcome, vol: Volume, out_dir) -> None:
    from .imaging import export_pgm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = outcome.spec
    for c in outcome.cases:
        if "error" in c:
            continue
        case = _make_case(spec, vol, c["id"])
        for v, (fixed, pose) in enumerate(zip(case.fixed_images, c["result"].refined_poses)):
            moving = render(vol, spec.geometry, pose, spec.refine.output)
            try:
                export_pgm(blend(fixed, moving), out_dir / f"case{c['id']:03d}_view{v + 1}_blend.pgm")
            except MvregError:
                continue
            write_ppm(edge_overlay(fixed, moving), out_dir / f"case{c['id']:03d}_view{v + 1}_edges.ppm")
