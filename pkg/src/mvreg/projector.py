"""DRR rendering: camera rays, Siddon ray/grid intersection, line integrals.

Camera convention: in the camera frame the X-ray source sits at the origin and
looks along +z; the detector plane is ``z = source_to_detector``; detector
column ``u`` runs along +x and row ``v`` along +y. A :class:`~mvreg.se3.Pose`
maps camera coordinates to world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from . import se3
from .errors import DataError, InvalidArgumentError
from .imaging import Image, Volume
from .se3 import Pose

# The bundled TBB is too old for numba; skip it instead of warning on import.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

OUTPUT_MODES = ("attenuation", "intensity")


@dataclass(frozen=True)
class DetectorGeometry:
    source_to_detector: float
    detector_width: int
    detector_height: int
    pixel_spacing: float
    principal_point: tuple = None

    def __post_init__(self):
        if not self.source_to_detector > 0 or not self.pixel_spacing > 0:
            raise InvalidArgumentError("source_to_detector and pixel_spacing must be positive")
        if int(self.detector_width) < 1 or int(self.detector_height) < 1:
            raise InvalidArgumentError("detector dimensions must be positive")
        object.__setattr__(self, "detector_width", int(self.detector_width))
        object.__setattr__(self, "detector_height", int(self.detector_height))
        object.__setattr__(self, "source_to_detector", float(self.source_to_detector))
        object.__setattr__(self, "pixel_spacing", float(self.pixel_spacing))
        pp = self.principal_point
        if pp is None:
            pp = ((self.detector_width - 1) / 2.0, (self.detector_height - 1) / 2.0)
        pp = (float(pp[0]), float(pp[1]))
        if not (0.0 <= pp[0] <= self.detector_width - 1 and 0.0 <= pp[1] <= self.detector_height - 1):
            raise InvalidArgumentError(f"principal point {pp} lies outside the detector")
        object.__setattr__(self, "principal_point", pp)

    @property
    def focal_length(self) -> float:
        return self.source_to_detector

    @property
    def shape(self) -> tuple:
        return (self.detector_height, self.detector_width)

    def intrinsic_matrix(self) -> np.ndarray:
        """3x3 pinhole matrix in pixel units."""
        fpx = self.source_to_detector / self.pixel_spacing
        return np.array(
            [[fpx, 0.0, self.principal_point[0]], [0.0, fpx, self.principal_point[1]], [0.0, 0.0, 1.0]]
        )

    def to_json(self) -> dict:
        return {
            "source_to_detector": self.source_to_detector,
            "detector_width": self.detector_width,
            "detector_height": self.detector_height,
            "pixel_spacing": self.pixel_spacing,
            "principal_point": list(self.principal_point),
        }

    @classmethod
    def from_json(cls, obj: dict) -> DetectorGeometry:
        try:
            return cls(
                obj["source_to_detector"],
                obj["detector_width"],
                obj["detector_height"],
                obj["pixel_spacing"],
                tuple(obj["principal_point"]) if obj.get("principal_point") is not None else None,
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad detector geometry: {exc!r}") from exc


@dataclass(frozen=True, eq=False)
class Ray:
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        s = np.array(self.source, dtype=float).reshape(3)
        g = np.array(self.target, dtype=float).reshape(3)
        if not np.linalg.norm(g - s) > 0:
            raise InvalidArgumentError("ray source and target coincide")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", g)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.target - self.source))


# PA camera: looks along world +y, detector u along +x, v along -z.
_PA_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def pa_pose(source_to_isocenter: float, center=(0.0, 0.0, 0.0)) -> Pose:
    """Postero-anterior camera whose axis passes through ``center``."""
    c = np.asarray(center, float)
    return Pose(_PA_ROTATION, c - _PA_ROTATION[:, 2] * float(source_to_isocenter))


def lat_pose(source_to_isocenter: float, center=(0.0, 0.0, 0.0)) -> Pose:
    """PA camera rotated by +90 degrees about the z axis through ``center``."""
    return se3.compose(se3.recentered_rotation(math.pi / 2, center), pa_pose(source_to_isocenter, center))


@lru_cache(maxsize=32)
def _camera_grid(geom: DetectorGeometry) -> np.ndarray:
    """Camera-frame pixel centers, shape (H*W, 3), row-major over (v, u)."""
    pu, pv = geom.principal_point
    u = (np.arange(geom.detector_width) - pu) * geom.pixel_spacing
    v = (np.arange(geom.detector_height) - pv) * geom.pixel_spacing
    vv, uu = np.meshgrid(v, u, indexing="ij")
    grid = np.stack([uu.ravel(), vv.ravel(), np.full(uu.size, geom.source_to_detector)], axis=1)
    grid.setflags(write=False)
    return grid


def pixel_targets(geom: DetectorGeometry, pose: Pose) -> np.ndarray:
    return pose.apply(_camera_grid(geom))


def pixel_ray(geom: DetectorGeometry, pose: Pose, u: float, v: float) -> Ray:
    """Ray from the source to the center of detector pixel ``(u, v)``."""
    if not (-0.5 <= u <= geom.detector_width - 0.5 and -0.5 <= v <= geom.detector_height - 0.5):
        raise InvalidArgumentError(f"pixel ({u}, {v}) is outside the detector")
    pu, pv = geom.principal_point
    cam = np.array([(u - pu) * geom.pixel_spacing, (v - pv) * geom.pixel_spacing, geom.source_to_detector])
    return Ray(pose.translation.copy(), pose.apply(cam))


def _clip_to_box(s, d, lo, hi):
    """Slab clipping of ``s + a*d`` to ``[lo, hi)``; returns (a_in, a_out) within [0, 1] or None."""
    a_in, a_out = 0.0, 1.0
    for ax in range(3):
        if d[ax] != 0.0:
            a0 = (lo[ax] - s[ax]) / d[ax]
            a1 = (hi[ax] - s[ax]) / d[ax]
            a_in = max(a_in, min(a0, a1))
            a_out = min(a_out, max(a0, a1))
        elif not lo[ax] <= s[ax] < hi[ax]:
            return None
    if a_out <= a_in:
        return None
    return a_in, a_out


def siddon_intersections(ray: Ray, vol: Volume) -> np.ndarray:
    """Sorted, deduplicated plane-crossing parameters of the ray inside the volume box.

    Includes the entry and exit parameters. Axes with a zero direction
    component contribute no planes. Empty when the ray misses.
    """
    s, g = ray.source, ray.target
    d = g - s
    lo, hi = vol.bounds
    clip = _clip_to_box(s, d, lo, hi)
    if clip is None:
        return np.zeros(0)
    a_in, a_out = clip
    alphas = [np.array([a_in, a_out])]
    for ax in range(3):
        if d[ax] == 0.0:
            continue
        planes = vol.origin[ax] + np.arange(vol.dims[ax] + 1) * vol.spacing[ax]
        a = (planes - s[ax]) / d[ax]
        alphas.append(a[(a > a_in) & (a < a_out)])
    return np.unique(np.concatenate(alphas))


def _box_args(vol: Volume):
    """Kernel arguments restricted to the nonzero support of the volume."""
    cached = vol.__dict__.get("_kernel_args")
    if cached is not None:
        return cached[0]
    sup = vol.support()
    args = None
    if sup is not None:
        (i0, j0, k0), (i1, j1, k1) = sup
        ox = vol.origin[0] + i0 * vol.spacing[0]
        oy = vol.origin[1] + j0 * vol.spacing[1]
        oz = vol.origin[2] + k0 * vol.spacing[2]
        sub = np.ascontiguousarray(vol.data[k0:k1, j0:j1, i0:i1])
        args = (sub, ox, oy, oz, vol.spacing[0], vol.spacing[1], vol.spacing[2])
    # Zero voxels contribute nothing, so tracing only the support is exact.
    object.__setattr__(vol, "_kernel_args", (args,))
    return args


@numba.njit(inline="always")
def _axis_start(s, d, a_in, o, sp, n):
    # (next crossing alpha, alpha per voxel, index step, first voxel index)
    if d > 0.0:
        k = int(math.floor((s + a_in * d - o) / sp))
        k = min(max(k, 0), n - 1)
        return (o + (k + 1) * sp - s) / d, sp / d, 1, k
    if d < 0.0:
        k = int(math.ceil((s + a_in * d - o) / sp)) - 1
        k = min(max(k, 0), n - 1)
        return (o + k * sp - s) / d, -sp / d, -1, k
    k = int(math.floor((s - o) / sp))
    return np.inf, np.inf, 0, k


@numba.njit(cache=True)
def _trace(sx, sy, sz, gx, gy, gz, vol, ox, oy, oz, dx, dy, dz):
    """Line integral of the voxel grid along s -> g (Siddon / incremental traversal).

    Each step covers the segment between consecutive plane crossings; the voxel
    index tracked incrementally is the one containing the segment midpoint.
    """
    nz, ny, nx = vol.shape
    ddx = gx - sx
    ddy = gy - sy
    ddz = gz - sz
    a_in = 0.0
    a_out = 1.0
    if ddx != 0.0:
        a0 = (ox - sx) / ddx
        a1 = (ox + nx * dx - sx) / ddx
        a_in = max(a_in, min(a0, a1))
        a_out = min(a_out, max(a0, a1))
    elif sx < ox or sx >= ox + nx * dx:
        return 0.0
    if ddy != 0.0:
        a0 = (oy - sy) / ddy
        a1 = (oy + ny * dy - sy) / ddy
        a_in = max(a_in, min(a0, a1))
        a_out = min(a_out, max(a0, a1))
    elif sy < oy or sy >= oy + ny * dy:
        return 0.0
    if ddz != 0.0:
        a0 = (oz - sz) / ddz
        a1 = (oz + nz * dz - sz) / ddz
        a_in = max(a_in, min(a0, a1))
        a_out = min(a_out, max(a0, a1))
    elif sz < oz or sz >= oz + nz * dz:
        return 0.0
    if a_out <= a_in:
        return 0.0
    nxt_x, inc_x, st_x, i = _axis_start(sx, ddx, a_in, ox, dx, nx)
    nxt_y, inc_y, st_y, j = _axis_start(sy, ddy, a_in, oy, dy, ny)
    nxt_z, inc_z, st_z, k = _axis_start(sz, ddz, a_in, oz, dz, nz)
    acc = 0.0
    a = a_in
    while True:
        if nxt_x <= nxt_y and nxt_x <= nxt_z:
            a_next = nxt_x
        elif nxt_y <= nxt_z:
            a_next = nxt_y
        else:
            a_next = nxt_z
        if a_next >= a_out:
            acc += (a_out - a) * vol[k, j, i]
            break
        acc += (a_next - a) * vol[k, j, i]
        if nxt_x <= a_next:
            i += st_x
            nxt_x += inc_x
            if i < 0 or i >= nx:
                break
        if nxt_y <= a_next:
            j += st_y
            nxt_y += inc_y
            if j < 0 or j >= ny:
                break
        if nxt_z <= a_next:
            k += st_z
            nxt_z += inc_z
            if k < 0 or k >= nz:
                break
        a = a_next
    return acc * math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)


@numba.njit(cache=True, parallel=True)
def _trace_many(src, targets, vol, ox, oy, oz, dx, dy, dz, out):
    for p in numba.prange(targets.shape[0]):
        out[p] = _trace(src[0], src[1], src[2], targets[p, 0], targets[p, 1], targets[p, 2],
                        vol, ox, oy, oz, dx, dy, dz)


def attenuate(ray: Ray, vol: Volume) -> float:
    """Accumulated attenuation along one ray; 0 when it misses the volume."""
    args = _box_args(vol)
    if args is None:
        return 0.0
    s, g = ray.source, ray.target
    return float(_trace(s[0], s[1], s[2], g[0], g[1], g[2], *args))


def beer_lambert(e_bar, e0: float = 1.0):
    return e0 * np.exp(-np.asarray(e_bar, dtype=float)) if np.ndim(e_bar) else e0 * math.exp(-float(e_bar))


def render(vol: Volume, geom: DetectorGeometry, pose: Pose, output: str = "attenuation") -> Image:
    """Render a DRR; one value per detector pixel."""
    if output not in OUTPUT_MODES:
        raise InvalidArgumentError(f"output must be one of {OUTPUT_MODES}, got {output!r}")
    out = np.zeros(geom.detector_width * geom.detector_height)
    args = _box_args(vol)
    if args is not None:
        targets = pixel_targets(geom, pose)
        _trace_many(np.ascontiguousarray(pose.translation), targets, *args, out)
    img = out.reshape(geom.shape)
    if output == "intensity":
        img = beer_lambert(img)
    return Image(img, geom.pixel_spacing)


def render_at_twist(vol: Volume, geom: DetectorGeometry, base_pose: Pose, delta,
                    output: str = "attenuation") -> Image:
    """Render at ``exp(delta) @ base_pose``."""
    return render(vol, geom, se3.compose(se3.exp(delta), base_pose), output)


def set_workers(n: int | None) -> None:
    """Cap the number of threads used for per-pixel rendering."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
