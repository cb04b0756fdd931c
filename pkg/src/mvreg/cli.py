"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Human-readable summaries go to stdout; machine-readable results go to files.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import se3
from .errors import (
    BranchAmbiguityError,
    DataError,
    MissingFileError,
    MvregError,
    NonFiniteObjectiveError,
)
from .evaluation import DEFAULT_LAMBDA, MetricReport, mtre
from .imaging import (
    PHANTOM_KINDS,
    export_pgm,
    load_image,
    load_landmarks,
    load_volume,
    make_phantom,
    save_image,
    save_landmarks,
    save_volume,
)
from .projector import OUTPUT_MODES, DetectorGeometry, pa_pose, render, set_workers
from .register import RefineConfig, fine_register, fine_register_coupled, load_external_poses

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(kind):
    def parse(text):
        parts = text.split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _load_geometry(path) -> DetectorGeometry:
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise DataError(f"{path}: geometry must be a JSON object")
    try:
        return DetectorGeometry.from_json(obj)
    except MvregError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_pose(path, index: int = 0):
    poses = load_external_poses(path)
    if not 0 <= index < len(poses):
        raise DataError(f"{path}: no pose at index {index} ({len(poses)} available)")
    return poses[index]


def _write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_image(img, geom, name):
    if img.data.shape != geom.shape:
        raise DataError(f"{name}: image shape {img.data.shape} does not match detector {geom.shape}")


# ---------------------------------------------------------------- subcommands


def cmd_phantom(args) -> int:
    vol, lms = make_phantom(args.kind, args.dims, args.spacing, args.seed)
    side = save_volume(vol, args.out)
    lm_path = Path(str(args.out) + ".landmarks.json")
    save_landmarks(lms, lm_path)
    print(f"wrote {side} and {lm_path} ({vol.dims[0]}x{vol.dims[1]}x{vol.dims[2]}, {len(lms)} landmarks)")
    return EXIT_OK


def cmd_render(args) -> int:
    vol = load_volume(args.volume)
    geom = _load_geometry(args.geom)
    pose = _load_pose(args.pose, args.index)
    img = render(vol, geom, pose, args.mode)
    side = save_image(img, args.out)
    print(f"wrote {side}")
    if args.pgm:
        export_pgm(img, args.pgm)
        print(f"wrote {args.pgm}")
    return EXIT_OK


def cmd_sample_poses(args) -> int:
    vol = load_volume(args.volume) if args.volume else None
    center = vol.center if vol is not None else np.zeros(3)
    base = pa_pose(args.source_to_isocenter, center)
    dist = se3.TwistDistribution.isotropic(args.translation_sd, args.rotation_sd)
    eps1 = se3.sample_twist(dist, args.seed)
    t1 = se3.compose(se3.exp(eps1), base)
    out = {"base": se3.pose_to_json(base), "eps1": se3.twist_to_json(eps1)}
    if args.mode == "temporal":
        eps2, eps = se3.sample_second_view(eps1, dist, args.seed + 1)
        t2 = se3.compose(se3.exp(eps2), base)
        out.update(eps2=se3.twist_to_json(eps2), eps=se3.twist_to_json(eps))
    else:
        t_trans = se3.recentered_rotation(args.theta, center)
        t2 = se3.compose(t_trans, t1)
        out["t_trans"] = se3.pose_to_json(t_trans)
    out["poses"] = [se3.pose_to_json(t1), se3.pose_to_json(t2)]
    _write_json(out, args.out)
    print(f"wrote {args.out} ({args.mode} pose pair)")
    return EXIT_OK


def _registration_inputs(args):
    vol = load_volume(args.volume)
    geom = _load_geometry(args.geom)
    fixed = [load_image(args.fixed1), load_image(args.fixed2)]
    for img, name in zip(fixed, (args.fixed1, args.fixed2)):
        _check_image(img, geom, name)
    cfg = RefineConfig.load(args.config) if args.config else RefineConfig()
    return vol, geom, fixed, cfg


def _finish_registration(result, args) -> int:
    _write_json(result.to_json(), args.out)
    ncc = result.ncc_trace[result.best_iteration] if result.best_iteration < len(result.ncc_trace) else None
    msg = f"wrote {args.out}: {result.iterations_run} iterations, converged={result.converged}"
    if ncc is not None:
        msg += f", best ncc = ({ncc[0]:.6f}, {ncc[1]:.6f})"
    print(msg)
    return EXIT_OK


def cmd_register(args) -> int:
    vol, geom, fixed, cfg = _registration_inputs(args)
    init = [_load_pose(args.init1), _load_pose(args.init2)]
    return _finish_registration(fine_register(vol, geom, fixed, init, cfg), args)


def cmd_register_coupled(args) -> int:
    vol, geom, fixed, cfg = _registration_inputs(args)
    init = _load_pose(args.init)
    if args.t_trans:
        t_trans = _load_pose(args.t_trans)
    else:
        t_trans = se3.recentered_rotation(args.theta, vol.center)
    return _finish_registration(fine_register_coupled(vol, geom, fixed, init, t_trans, cfg), args)


def cmd_evaluate(args) -> int:
    geom = _load_geometry(args.geom)
    true_poses = load_external_poses(args.true_poses)
    est_poses = load_external_poses(args.est_poses)
    lms = load_landmarks(args.landmarks)
    k = args.views_per_case
    if len(true_poses) != len(est_poses):
        raise DataError(f"{len(true_poses)} true poses but {len(est_poses)} estimated poses")
    if len(true_poses) % k:
        raise DataError(f"pose count {len(true_poses)} is not a multiple of views-per-case {k}")
    report = MetricReport(lambda_mm_per_px=args.lam)
    for c in range(len(true_poses) // k):
        sl = slice(c * k, (c + 1) * k)
        report.cases.append((c, mtre(geom, true_poses[sl], est_poses[sl], lms, args.lam)))
    print(f"lambda = {args.lam:g} mm/px, {report.n_cases} case(s)")
    print(f"mTRE (mm), SMRSR: {report.summary()}")
    if args.out:
        _write_json(report.to_json(), args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .pipeline import ExperimentSpec, run_experiment

    spec = ExperimentSpec.load(args.spec)
    out_dir = Path(args.out_dir)
    overlays = out_dir / "overlays" if args.overlays else None
    outcome = run_experiment(spec, workers=args.workers or 1, overlay_dir=overlays)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_bytes(outcome.to_json_bytes())
    print(f"cases: {spec.n_cases}, failures: {len(outcome.failures)}, lambda = {spec.lambda_mm_per_px:g} mm/px")
    print(f"before refinement: {outcome.before.summary()}")
    print(f"after refinement:  {outcome.after.summary()}")
    print(f"wrote {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvreg", description="Multi-view 2D/3D X-ray registration toolkit.")
    parser.add_argument("--workers", type=int, default=None, help="cap on worker threads/processes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic volume and its landmarks")
    p.add_argument("--kind", choices=PHANTOM_KINDS, default="sphere_pair")
    p.add_argument("--dims", type=_triple(int), default=(64, 64, 64))
    p.add_argument("--spacing", type=_triple(float), default=(2.0, 2.0, 2.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render one DRR")
    p.add_argument("--volume", required=True)
    p.add_argument("--pose", required=True, help="pose JSON file (a pose or a list of poses)")
    p.add_argument("--index", type=int, default=0, help="which pose in a list")
    p.add_argument("--geom", required=True)
    p.add_argument("--mode", choices=OUTPUT_MODES, default="attenuation")
    p.add_argument("--out", required=True, help="output image stem")
    p.add_argument("--pgm", default=None, help="also export a 16-bit PGM")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sample-poses", help="sample a true pose pair around the PA view")
    p.add_argument("--volume", default=None, help="volume whose center is the isocenter")
    p.add_argument("--source-to-isocenter", type=float, default=600.0)
    p.add_argument("--translation-sd", type=float, default=5.0)
    p.add_argument("--rotation-sd", type=float, default=0.05)
    p.add_argument("--mode", choices=("temporal", "spatial"), default="temporal")
    p.add_argument("--theta", type=float, default=math.pi / 2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_poses)

    for name, func, help_text in (
        ("register", cmd_register, "refine two independent view poses"),
        ("register-coupled", cmd_register_coupled, "refine one shared twist for a PA/LAT pair"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--volume", required=True)
        p.add_argument("--geom", required=True)
        p.add_argument("--fixed1", required=True)
        p.add_argument("--fixed2", required=True)
        if name == "register":
            p.add_argument("--init1", required=True)
            p.add_argument("--init2", required=True)
        else:
            p.add_argument("--init", required=True, help="initial pose of view 1")
            p.add_argument("--theta", type=float, default=math.pi / 2)
            p.add_argument("--t-trans", default=None, help="inter-view transform file (overrides --theta)")
        p.add_argument("--config", default=None, help="RefineConfig JSON overrides")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="mTRE and SMRSR of estimated against true poses")
    p.add_argument("--true-poses", required=True)
    p.add_argument("--est-poses", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--geom", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA, help="mm per pixel")
    p.add_argument("--views-per-case", type=int, default=2)
    p.add_argument("--out", default=None, help="optional report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a synthetic registration study")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--overlays", action="store_true", help="write per-case overlay images")
    p.set_defaults(func=cmd_experiment)
    return parser


def _validate(args):
    if args.workers is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if getattr(args, "views_per_case", 1) < 1:
        raise UsageError("--views-per-case must be >= 1")
    if getattr(args, "lam", 1.0) <= 0:
        raise UsageError("--lambda must be positive")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    set_workers(args.workers)
    if args.command == "experiment" and args.workers is None:
        args.workers = 1
    try:
        return args.func(args)
    except (NonFiniteObjectiveError, BranchAmbiguityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MvregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
