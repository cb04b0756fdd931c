"""Volume/image containers, raw+sidecar file IO, phantoms and landmarks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateImageError,
    InvalidArgumentError,
    LandmarkError,
    LengthMismatchError,
    MissingFileError,
    SidecarError,
    SpacingError,
)

DTYPE_TAG = "f32le"
_RAW_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class Volume:
    """Attenuation grid (1/mm) indexed ``data[k, j, i]`` so x varies fastest.

    Voxel ``(i, j, k)`` occupies the world cell ``[origin + idx*spacing,
    origin + (idx+1)*spacing)``.

    Values are held in double precision; files store them as 32-bit floats, so
    a save/load round-trip is exact only for float32-representable data.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    _support: tuple = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"volume data must be a non-empty 3D array, got {data.shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise InvalidArgumentError("volume values must be finite and non-negative")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise InvalidArgumentError("spacing and origin need 3 components")
        if min(spacing) <= 0:
            raise SpacingError("voxel spacing must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "_support", _nonzero_box(data))

    @property
    def dims(self) -> tuple:
        """``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, float) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.extent / 2.0

    @property
    def bounds(self):
        lo = np.asarray(self.origin)
        return lo, lo + self.extent

    def scaled(self, factor: float) -> Volume:
        return Volume(self.data * float(factor), self.spacing, self.origin)

    def world_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, float)
        return np.floor((p - np.asarray(self.origin)) / np.asarray(self.spacing)).astype(np.int64)

    def support(self):
        """Voxel index box ``((i0, j0, k0), (i1, j1, k1))`` (exclusive end) of nonzero data."""
        return self._support


def _nonzero_box(data):
    nz = np.nonzero(data)
    if nz[0].size == 0:
        return None
    k0, k1 = int(nz[0].min()), int(nz[0].max()) + 1
    j0, j1 = int(nz[1].min()), int(nz[1].max()) + 1
    i0, i1 = int(nz[2].min()), int(nz[2].max()) + 1
    return (i0, j0, k0), (i1, j1, k1)


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major 2D image, ``data[v, u]`` with ``height`` rows and ``width`` columns."""

    data: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or min(data.shape) < 1:
            raise InvalidArgumentError(f"image data must be a non-empty 2D array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("image values must be finite")
        if not self.pixel_spacing > 0:
            raise SpacingError("pixel spacing must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_spacing", float(self.pixel_spacing))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    names: tuple
    points: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        pts = np.array(self.points, dtype=float).reshape(-1, 3) if len(self.points) else np.zeros((0, 3))
        if len(names) != len(pts):
            raise LandmarkError(f"{len(names)} names but {len(pts)} points")
        if len(names) == 0:
            raise LandmarkError("landmark set must not be empty")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise LandmarkError(f"duplicate landmark names: {dup}")
        if not np.all(np.isfinite(pts)):
            raise LandmarkError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.points[self.names.index(name)]


# ---------------------------------------------------------------- file IO


def _stem(path) -> Path:
    p = Path(path)
    for suffix in (".vol.json", ".vol.raw", ".img.json", ".img.raw"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def _read_sidecar(path: Path) -> dict:
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(meta, dict):
        raise SidecarError(f"{path}: sidecar must be a JSON object")
    if meta.get("dtype", DTYPE_TAG) != DTYPE_TAG:
        raise SidecarError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    return meta


def _read_raw(path: Path, count: int) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) % 4 != 0 or len(raw) // 4 != count:
        raise LengthMismatchError(f"{path}: expected {count} floats, found {len(raw) / 4:g}")
    return np.frombuffer(raw, dtype=_RAW_DTYPE).astype(np.float64)


def save_volume(vol: Volume, path) -> Path:
    """Write ``<stem>.vol.json`` and ``<stem>.vol.raw``; returns the sidecar path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": DTYPE_TAG,
    }
    raw = stem.with_name(stem.name + ".vol.raw")
    raw.write_bytes(np.ascontiguousarray(vol.data, dtype=_RAW_DTYPE).tobytes())
    side = stem.with_name(stem.name + ".vol.json")
    side.write_text(json.dumps(meta, indent=2))
    return side


def load_volume(path) -> Volume:
    stem = _stem(path)
    side = stem.with_name(stem.name + ".vol.json")
    meta = _read_sidecar(side)
    try:
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing"]]
        origin = [float(o) for o in meta.get("origin", [0.0, 0.0, 0.0])]
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarError(f"{side}: malformed sidecar ({exc!r})") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise SidecarError(f"{side}: dims/spacing/origin need 3 components and positive dims")
    if min(spacing) <= 0:
        raise SpacingError(f"{side}: spacing must be positive, got {spacing}")
    nx, ny, nz = dims
    data = _read_raw(stem.with_name(stem.name + ".vol.raw"), nx * ny * nz)
    return Volume(data.reshape(nz, ny, nx), spacing, origin)


def save_image(img: Image, path) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "width": img.width,
        "height": img.height,
        "pixel_spacing": img.pixel_spacing,
        "dtype": DTYPE_TAG,
    }
    stem.with_name(stem.name + ".img.raw").write_bytes(img.data.astype(_RAW_DTYPE).tobytes())
    side = stem.with_name(stem.name + ".img.json")
    side.write_text(json.dumps(meta, indent=2))
    return side


def load_image(path) -> Image:
    stem = _stem(path)
    side = stem.with_name(stem.name + ".img.json")
    meta = _read_sidecar(side)
    try:
        w, h = int(meta["width"]), int(meta["height"])
        ps = float(meta["pixel_spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarError(f"{side}: malformed sidecar ({exc!r})") from exc
    if w < 1 or h < 1:
        raise SidecarError(f"{side}: width and height must be positive")
    if ps <= 0:
        raise SpacingError(f"{side}: pixel spacing must be positive")
    data = _read_raw(stem.with_name(stem.name + ".img.raw"), w * h)
    return Image(data.reshape(h, w).astype(float), ps)


def export_pgm(img: Image, path) -> Path:
    """16-bit binary PGM of the min-max normalized image."""
    norm = normalize_image(img).data
    vals = np.round(norm * 65535.0).astype(">u2")
    path = Path(path)
    header = f"P5\n{img.width} {img.height}\n65535\n".encode()
    path.write_bytes(header + vals.tobytes())
    return path


def save_landmarks(lms: LandmarkSet, path) -> Path:
    path = Path(path)
    path.write_text(
        json.dumps({"names": list(lms.names), "points": [[float(c) for c in p] for p in lms.points]}, indent=2)
    )
    return path


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        obj = json.loads(path.read_text())
        names, points = obj["names"], obj["points"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LandmarkError(f"{path}: malformed landmark file ({exc!r})") from exc
    if any(len(p) != 3 for p in points):
        raise LandmarkError(f"{path}: every point needs 3 coordinates")
    return LandmarkSet(names, np.asarray(points, dtype=float).reshape(-1, 3))


# ---------------------------------------------------------------- intensity


def normalize_image(img: Image) -> Image:
    """Affine rescale to [0, 1]."""
    lo, hi = float(img.data.min()), float(img.data.max())
    if not hi > lo:
        raise DegenerateImageError("cannot normalize a constant image")
    out = (img.data - lo) / (hi - lo)
    return Image(out, img.pixel_spacing)


# ---------------------------------------------------------------- phantoms

PHANTOM_KINDS = ("sphere_pair", "nested_boxes", "pelvis_like")
MIN_PHANTOM_DIM = 16


def _voxel_centers(dims, spacing, origin):
    nx, ny, nz = dims
    axes = [origin[a] + (np.arange(n) + 0.5) * spacing[a] for a, n in enumerate((nx, ny, nz))]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return xx, yy, zz


def _ball(xx, yy, zz, center, radius, peak, falloff=0.5):
    """Graded ball: ``peak * (1 - falloff * (r/R)^2)`` inside, 0 outside."""
    r2 = ((xx - center[0]) ** 2 + (yy - center[1]) ** 2 + (zz - center[2]) ** 2) / radius**2
    return np.where(r2 < 1.0, peak * (1.0 - falloff * r2), 0.0)


def _ellipsoid(xx, yy, zz, center, radii, peak):
    r2 = sum(((c - c0) / r) ** 2 for c, c0, r in zip((xx, yy, zz), center, radii))
    return np.where(r2 < 1.0, peak * (1.0 - 0.5 * r2), 0.0)


def _box(xx, yy, zz, lo, hi, value):
    inside = (xx >= lo[0]) & (xx < hi[0]) & (yy >= lo[1]) & (yy < hi[1]) & (zz >= lo[2]) & (zz < hi[2])
    return np.where(inside, value, 0.0)


def make_phantom(kind: str, dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), rng_seed: int = 0):
    """Build an attenuation phantom centered on the world origin plus its landmarks.

    The seed jitters feature placement by up to one voxel-scale fraction of the
    extent; landmark coordinates always report the positions actually used.
    """
    if kind not in PHANTOM_KINDS:
        raise InvalidArgumentError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIM:
        raise InvalidArgumentError(f"phantom dims must be >= {MIN_PHANTOM_DIM} per axis, got {dims}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise SpacingError("phantom spacing must be positive")
    extent = np.asarray(dims, float) * np.asarray(spacing)
    origin = tuple(-extent / 2.0)
    xx, yy, zz = _voxel_centers(dims, spacing, origin)
    rng = np.random.Generator(np.random.Philox(int(rng_seed)))
    half = extent / 2.0
    jitter = rng.uniform(-0.02, 0.02, size=(4, 3)) * extent
    builder = {"sphere_pair": _sphere_pair, "nested_boxes": _nested_boxes, "pelvis_like": _pelvis_like}[kind]
    data, names, points = builder(xx, yy, zz, half, jitter)
    vol = Volume(data.astype(np.float32), spacing, origin)
    return vol, LandmarkSet(names, np.asarray(points))


def _sphere_pair(xx, yy, zz, half, jitter):
    s = float(min(half))
    ca = np.array([-0.30, 0.05, 0.12]) * half + jitter[0]
    cb = np.array([0.32, -0.08, -0.18]) * half + jitter[1]
    ra, rb = 0.34 * s, 0.22 * s
    # Eccentric dense cores break the rotational symmetry about the A-B axis.
    core_a = ca + np.array([0.0, 0.35 * ra, -0.4 * ra])
    core_b = cb + np.array([0.45 * rb, 0.0, 0.3 * rb])
    data = _ball(xx, yy, zz, ca, ra, 0.020)
    data = data + _ball(xx, yy, zz, cb, rb, 0.030)
    data = data + _ball(xx, yy, zz, core_a, 0.35 * ra, 0.025, falloff=0.3)
    data = data + _ball(xx, yy, zz, core_b, 0.4 * rb, 0.020, falloff=0.3)
    names = ["center_A", "center_B", "core_A", "core_B", "top_A", "side_A", "bottom_B", "side_B", "midpoint_AB"]
    points = [
        ca,
        cb,
        core_a,
        core_b,
        ca + [0.0, 0.0, 0.9 * ra],
        ca + [-0.9 * ra, 0.0, 0.0],
        cb + [0.0, 0.0, -0.9 * rb],
        cb + [0.0, 0.9 * rb, 0.0],
        (ca + cb) / 2.0,
    ]
    return data, names, points


def _nested_boxes(xx, yy, zz, half, jitter):
    outer_lo = np.array([-0.6, -0.5, -0.55]) * half + jitter[0]
    outer_hi = np.array([0.55, 0.45, 0.6]) * half + jitter[0]
    mid_lo = np.array([-0.4, -0.3, -0.35]) * half + jitter[1]
    mid_hi = np.array([0.15, 0.25, 0.3]) * half + jitter[1]
    inner_lo = np.array([-0.3, -0.2, -0.1]) * half + jitter[2]
    inner_hi = np.array([-0.05, 0.1, 0.2]) * half + jitter[2]
    notch_lo = np.array([0.25, -0.4, 0.2]) * half + jitter[3]
    notch_hi = np.array([0.5, -0.1, 0.5]) * half + jitter[3]
    data = _box(xx, yy, zz, outer_lo, outer_hi, 0.006)
    data = data + _box(xx, yy, zz, mid_lo, mid_hi, 0.010)
    data = data + _box(xx, yy, zz, inner_lo, inner_hi, 0.020)
    data = data + _box(xx, yy, zz, notch_lo, notch_hi, 0.015)
    names = [
        "outer_lo",
        "outer_hi",
        "mid_lo",
        "mid_hi",
        "inner_lo",
        "inner_hi",
        "notch_lo",
        "notch_hi",
        "inner_center",
    ]
    points = [outer_lo, outer_hi, mid_lo, mid_hi, inner_lo, inner_hi, notch_lo, notch_hi, (inner_lo + inner_hi) / 2]
    return data, names, points


def _pelvis_like(xx, yy, zz, half, jitter):
    """Crude hip: two femoral heads, iliac wings, pubic bar, sacrum."""
    s = float(min(half))
    fh_l = np.array([-0.45, 0.0, -0.35]) * half + jitter[0]
    fh_r = np.array([0.47, 0.03, -0.33]) * half + jitter[1]
    wing_l = np.array([-0.5, 0.1, 0.35]) * half + jitter[2]
    wing_r = np.array([0.52, 0.08, 0.38]) * half + jitter[2]
    sacrum = np.array([0.02, 0.45, 0.25]) * half + jitter[3]
    pubis = np.array([0.0, -0.45, -0.5]) * half + jitter[3]
    data = _ball(xx, yy, zz, fh_l, 0.2 * s, 0.025)
    data = data + _ball(xx, yy, zz, fh_r, 0.19 * s, 0.025)
    data = data + _ellipsoid(xx, yy, zz, wing_l, (0.22 * s, 0.1 * s, 0.3 * s), 0.015)
    data = data + _ellipsoid(xx, yy, zz, wing_r, (0.2 * s, 0.12 * s, 0.28 * s), 0.015)
    data = data + _ellipsoid(xx, yy, zz, sacrum, (0.18 * s, 0.12 * s, 0.25 * s), 0.018)
    data = data + _ellipsoid(xx, yy, zz, pubis, (0.45 * s, 0.08 * s, 0.08 * s), 0.020)
    names, points = [], []
    for side, fh, wing, sx in (("L", fh_l, wing_l, -1.0), ("R", fh_r, wing_r, 1.0)):
        names += [f"{side}.FH", f"{side}.GSN", f"{side}.IOF", f"{side}.MOF", f"{side}.SPS", f"{side}.IPS", f"{side}.ASIS"]
        points += [
            fh,
            wing + np.array([0.0, 0.08 * s, -0.25 * s]),
            pubis + np.array([sx * 0.3 * s, 0.0, -0.05 * s]),
            pubis + np.array([sx * 0.25 * s, 0.0, 0.05 * s]),
            pubis + np.array([sx * 0.05 * s, 0.0, 0.06 * s]),
            pubis + np.array([sx * 0.05 * s, 0.0, -0.06 * s]),
            wing + np.array([sx * 0.1 * s, -0.08 * s, 0.25 * s]),
        ]
    return data, names, points
