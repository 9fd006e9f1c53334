"""Camera viewpoint sampling and pinhole projection of 3D boxes into 2D labels.

Conventions, used consistently across the package:

* World frame is right-handed with +z up. The camera orbits a target point
  on a sphere parameterized by azimuth (rotation about +z, measured from +x
  toward +y) and elevation (angle above the target's horizontal plane).
* Camera frame is the usual computer-vision layout: +x right, +y down,
  +z forward along the optical axis.
* Image origin is the top-left corner; u grows right, v grows down.
* A PixelBox stores edge coordinates (x_min, y_min, x_max, y_max) in pixels.
  A NormBox stores (cx, cy, w, h) as fractions of the image dimensions.

Label files hold one object per line, space separated::

    <class_id> <cx> <cy> <w> <h>

with the four reals printed to 6 decimal places, LF line endings, '.' as
the decimal separator and no trailing whitespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateFrame,
    KindError,
    OutsideFrame,
    RangeError,
)

DEFAULT_Z_EPS = 1e-6


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"Vec3 components must be finite: {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a: Sequence[float]) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))


ORIGIN = Vec3(0.0, 0.0, 0.0)
WORLD_UP = Vec3(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole camera, zero distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """Orbit pose: spherical offset from a target point plus an up hint."""

    azimuth: float
    elevation: float
    radius: float
    target: Vec3 = ORIGIN
    up: Vec3 = WORLD_UP

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError("elevation must lie in [-pi/2, pi/2]")
        if np.linalg.norm(self.up.as_array()) < 1e-12:
            raise ValueError("up vector must be non-zero")

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        ce = math.cos(self.elevation)
        direction = np.array(
            [
                ce * math.cos(self.azimuth),
                ce * math.sin(self.azimuth),
                math.sin(self.elevation),
            ]
        )
        return self.target.as_array() + self.radius * direction


@dataclass(frozen=True)
class ViewpointSpec:
    """Stratified grid of orbit poses over a sub-region of the hemisphere.

    Each of the three axes is divided into n equal cells; one pose sits at
    each cell center, perturbed uniformly by +/- jitter_fraction of the cell
    size (then clamped back into the configured range). jitter_fraction = 0
    gives the plain grid.
    """

    azimuth_range: tuple[float, float]
    elevation_range: tuple[float, float]
    radius_range: tuple[float, float]
    n_azimuth: int
    n_elevation: int
    n_radius: int
    jitter_fraction: float = 0.0
    seed: int = 0
    target: Vec3 = ORIGIN
    up: Vec3 = WORLD_UP

    def __post_init__(self):
        for name, (lo, hi) in (
            ("azimuth_range", self.azimuth_range),
            ("elevation_range", self.elevation_range),
            ("radius_range", self.radius_range),
        ):
            if lo > hi:
                raise RangeError(f"{name} is inverted: [{lo}, {hi}]")
        if self.radius_range[0] <= 0:
            raise RangeError("radius_range must be positive")
        for name, n in (
            ("n_azimuth", self.n_azimuth),
            ("n_elevation", self.n_elevation),
            ("n_radius", self.n_radius),
        ):
            if n < 1:
                raise RangeError(f"{name} must be >= 1")
        if not 0 <= self.jitter_fraction < 1:
            raise RangeError("jitter_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class Box3D:
    """Oriented 3D box: center, per-axis half extents, object-to-world rotation."""

    center: Vec3
    half_extents: Vec3
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        h = self.half_extents
        if min(h.x, h.y, h.z) <= 0:
            raise ValueError("half extents must be positive")
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal (R^T R = I within 1e-9)")
        object.__setattr__(self, "rotation", r)

    def corners(self) -> np.ndarray:
        """All 8 corners in world coordinates, shape (8, 3)."""
        h = self.half_extents.as_array()
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        return self.center.as_array() + (self.rotation @ (signs * h).T).T


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in pixel edge coordinates. Zero area is allowed."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted PixelBox: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersect(self, other: "PixelBox") -> "PixelBox | None":
        x0 = max(self.x_min, other.x_min)
        y0 = max(self.y_min, other.y_min)
        x1 = min(self.x_max, other.x_max)
        y1 = min(self.y_max, other.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return PixelBox(x0, y0, x1, y1)

    def scaled(self, factor: float) -> "PixelBox":
        return PixelBox(
            self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor
        )


@dataclass(frozen=True)
class NormBox:
    """Center/size box as fractions of the image dimensions."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"NormBox must have positive size: {self}")
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise ValueError(f"NormBox center must lie in [0, 1]: {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def quantized(self) -> "NormBox":
        """The box as it survives a 6-decimal label-file round trip."""
        return NormBox(
            float(f"{self.cx:.6f}"),
            float(f"{self.cy:.6f}"),
            float(f"{self.w:.6f}"),
            float(f"{self.h:.6f}"),
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """World-to-camera rotation and translation: p_cam = R @ p_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p: Vec3 | np.ndarray) -> np.ndarray:
        v = p.as_array() if isinstance(p, Vec3) else np.asarray(p, dtype=float)
        return self.rotation @ v + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def sample_viewpoints(spec: ViewpointSpec) -> list[CameraPose]:
    """Deterministic stratified-grid-plus-jitter viewpoint sampling.

    Returns exactly n_azimuth * n_elevation * n_radius poses, iterated
    azimuth-major, then elevation, then radius. The same spec (including
    seed) always yields the same list.
    """
    rng = np.random.default_rng(spec.seed)
    jf = spec.jitter_fraction

    def cells(lo: float, hi: float, n: int) -> list[tuple[float, float]]:
        size = (hi - lo) / n
        return [(lo + (i + 0.5) * size, size) for i in range(n)]

    az_cells = cells(*spec.azimuth_range, spec.n_azimuth)
    el_cells = cells(*spec.elevation_range, spec.n_elevation)
    r_cells = cells(*spec.radius_range, spec.n_radius)

    def jittered(center: float, size: float, lo: float, hi: float) -> float:
        value = center + rng.uniform(-jf, jf) * size
        return min(max(value, lo), hi)

    poses = []
    for az_c, az_s in az_cells:
        for el_c, el_s in el_cells:
            for r_c, r_s in r_cells:
                poses.append(
                    CameraPose(
                        azimuth=jittered(az_c, az_s, *spec.azimuth_range),
                        elevation=jittered(el_c, el_s, *spec.elevation_range),
                        radius=jittered(r_c, r_s, *spec.radius_range),
                        target=spec.target,
                        up=spec.up,
                    )
                )
    return poses


def extrinsics_from_pose(pose: CameraPose) -> RigidTransform:
    """Look-at transform: camera at the orbit position, optical axis at the target."""
    position = pose.position()
    forward = pose.target.as_array() - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DegenerateFrame("camera position coincides with target")
    z_cam = forward / norm

    up = pose.up.as_array()
    up = up / np.linalg.norm(up)
    x_cam = np.cross(z_cam, up)
    x_norm = np.linalg.norm(x_cam)
    if x_norm < 1e-9:
        raise DegenerateFrame("up vector is parallel to the viewing direction")
    x_cam /= x_norm
    y_cam = np.cross(z_cam, x_cam)

    rotation = np.stack([x_cam, y_cam, z_cam])
    translation = -rotation @ position
    return RigidTransform(rotation, translation)


def project_point(
    intr: CameraIntrinsics,
    extr: RigidTransform,
    p: Vec3 | np.ndarray,
    z_eps: float = DEFAULT_Z_EPS,
) -> tuple[float, float]:
    """Pinhole projection of a world point to pixel coordinates (u, v)."""
    x, y, z = extr.apply(p)
    if z <= z_eps:
        raise BehindCamera(f"point at camera depth {z:.3g} <= {z_eps:.3g}")
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    return float(u), float(v)


def project_box3(
    intr: CameraIntrinsics,
    extr: RigidTransform,
    box: Box3D,
    z_eps: float = DEFAULT_Z_EPS,
) -> PixelBox:
    """Project all 8 corners and return their envelope clipped to the image.

    Any corner behind the camera fails the whole box; an envelope that does
    not overlap the image rectangle (including degenerate edge contact)
    raises OutsideFrame.
    """
    us, vs = [], []
    for corner in box.corners():
        u, v = project_point(intr, extr, corner, z_eps)
        us.append(u)
        vs.append(v)
    envelope = PixelBox(min(us), min(vs), max(us), max(vs))
    clipped = envelope.intersect(PixelBox(0.0, 0.0, float(intr.width), float(intr.height)))
    if clipped is None:
        raise OutsideFrame(f"projected envelope {envelope} misses the image")
    return clipped


def norm_from_pixel(b: PixelBox, width: float, height: float) -> NormBox:
    if width <= 0 or height <= 0:
        raise RangeError(f"image dimensions must be positive: {width}x{height}")
    if b.width <= 0 or b.height <= 0:
        raise RangeError(f"cannot normalize a degenerate box: {b}")
    return NormBox(
        cx=float((b.x_min + b.x_max) / 2 / width),
        cy=float((b.y_min + b.y_max) / 2 / height),
        w=float(b.width / width),
        h=float(b.height / height),
    )


def pixel_from_norm(b: NormBox, width: float, height: float) -> PixelBox:
    if width <= 0 or height <= 0:
        raise RangeError(f"image dimensions must be positive: {width}x{height}")
    w = b.w * width
    h = b.h * height
    x = b.cx * width
    y = b.cy * height
    return PixelBox(float(x - w / 2), float(y - h / 2), float(x + w / 2), float(y + h / 2))


def iou(a: PixelBox | NormBox, b: PixelBox | NormBox) -> float:
    """Intersection over union of two boxes of the same kind.

    Disjoint boxes give 0; so does any box with zero area.
    """
    if type(a) is not type(b):
        raise KindError(f"cannot mix box kinds: {type(a).__name__} vs {type(b).__name__}")
    if isinstance(a, NormBox):
        ax = (a.cx - a.w / 2, a.cy - a.h / 2, a.cx + a.w / 2, a.cy + a.h / 2)
        bx = (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)
    else:
        ax = (a.x_min, a.y_min, a.x_max, a.y_max)
        bx = (b.x_min, b.y_min, b.x_max, b.y_max)
    inter_w = min(ax[2], bx[2]) - max(ax[0], bx[0])
    inter_h = min(ax[3], bx[3]) - max(ax[1], bx[1])
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    area_a = (ax[2] - ax[0]) * (ax[3] - ax[1])
    area_b = (bx[2] - bx[0]) * (bx[3] - bx[1])
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


# --- label file format ------------------------------------------------------


def format_label_line(class_id: int, box: NormBox) -> str:
    return f"{class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def labels_to_bytes(labels: Iterable[tuple[int, NormBox]]) -> bytes:
    lines = [format_label_line(class_id, box) for class_id, box in labels]
    if not lines:
        return b""
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_label_text(text: str) -> list[tuple[int, NormBox]]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 5:
            raise ValueError(f"label line {lineno} must have 5 fields: {line!r}")
        class_id = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
        labels.append((class_id, NormBox(cx, cy, w, h)))
    return labels


def write_label_file(path: str | Path, labels: Iterable[tuple[int, NormBox]]) -> None:
    Path(path).write_bytes(labels_to_bytes(labels))


def parse_label_file(path: str | Path) -> list[tuple[int, NormBox]]:
    return parse_label_text(Path(path).read_bytes().decode("ascii"))
