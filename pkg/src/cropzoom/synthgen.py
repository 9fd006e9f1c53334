"""Semi-synthetic dataset generation by compositing sprites onto backgrounds.

Foreground objects are RGBA sprites (the alpha matte is the silhouette).
Each placed object is scaled, sheared, rotated, lit, and alpha-composited
at a random position fully inside the background; its label is the tight
envelope of the transformed alpha mask, which stays correct for any
silhouette shape. Illumination multiplies RGB only, so it never moves a
label.

Determinism: compose_sample is a pure function of its inputs and the
generator passed in. generate_dataset derives one generator per image from
(seed, image index), so its output is byte-identical for a fixed seed no
matter how the work would be scheduled. Random draws per composited sample
happen in a fixed, documented order:

1. brightness, then tint index (one illumination draw per image);
2. the object count k;
3. per object: asset index, log-scale fraction, rotation, shear x,
   shear y, then the integer paste position (x, then y). A transform that
   cannot fit inside the background is redrawn from the scale step (at
   most 50 times); with allow_overlap=False the position alone is redrawn
   (at most 100 times) before the object is skipped.

Boxes that end up smaller than 4 square pixels after clamping are dropped
and counted rather than emitted.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import AssetError, ConfigError, PlacementError, RangeError
from .geometry import (
    Box3D,
    CameraIntrinsics,
    CameraPose,
    NormBox,
    PixelBox,
    extrinsics_from_pose,
    labels_to_bytes,
    norm_from_pixel,
    parse_label_text,
    project_box3,
)
from .errors import BehindCamera, DegenerateFrame, OutsideFrame

MIN_BOX_AREA_PX = 4.0  # boxes below this are dropped as labeling noise
_MAX_FIT_RETRIES = 50
_MAX_OVERLAP_RETRIES = 100

APPLY_FOREGROUND_ONLY = "foreground_only"
APPLY_WHOLE_IMAGE = "whole_image"

DEFAULT_TINTS = ((1.0, 1.0, 1.0), (1.0, 0.9, 0.6))  # white and warm yellow light


@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGBA raster, 8 bits per channel, row-major (height, width, 4) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 4 or p.dtype != np.uint8:
            raise ValueError(f"RasterImage needs (h, w, 4) uint8 pixels, got {p.shape} {p.dtype}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(p))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def solid(cls, width: int, height: int, rgba: tuple[int, int, int, int]) -> "RasterImage":
        return cls(np.full((height, width, 4), rgba, dtype=np.uint8))

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "RasterImage":
        rgb = np.asarray(rgb, dtype=np.uint8)
        alpha = np.full(rgb.shape[:2] + (1,), 255, dtype=np.uint8)
        return cls(np.concatenate([rgb, alpha], axis=2))

    @classmethod
    def load(cls, path: str | Path) -> "RasterImage":
        with Image.open(path) as img:
            return cls(np.asarray(img.convert("RGBA")))

    def to_pil(self) -> Image.Image:
        return Image.fromarray(self.pixels, mode="RGBA")

    def to_rgb(self) -> np.ndarray:
        return self.pixels[:, :, :3].copy()

    def png_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        self.to_pil().save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.png_bytes())


@dataclass(frozen=True, eq=False)
class ForegroundAsset:
    image: RasterImage
    class_id: int
    name: str

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not np.any(self.image.pixels[:, :, 3] > 0):
            raise ValueError(f"asset {self.name!r} has a fully transparent alpha matte")


@dataclass(frozen=True)
class PlacementSpec:
    count_range: tuple[int, int] = (1, 3)
    scale_range: tuple[float, float] = (0.08, 0.25)  # object width / background width
    rotation_range: tuple[float, float] = (0.0, 0.0)  # radians
    shear_range: tuple[float, float] = (0.0, 0.0)
    allow_overlap: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be positive and ordered")
        cmin, cmax = self.count_range
        if cmin < 0 or cmax < cmin:
            raise ValueError("count_range must be ordered and non-negative")
        for name, (a, b) in (("rotation_range", self.rotation_range), ("shear_range", self.shear_range)):
            if a > b:
                raise ValueError(f"{name} is inverted")


@dataclass(frozen=True)
class IlluminationSpec:
    brightness_range: tuple[float, float] = (1.0, 1.0)
    tints: tuple[tuple[float, float, float], ...] = DEFAULT_TINTS
    apply_to: str = APPLY_FOREGROUND_ONLY

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise ValueError("brightness_range must be positive and ordered")
        if not self.tints:
            raise ValueError("at least one tint is required")
        if self.apply_to not in (APPLY_FOREGROUND_ONLY, APPLY_WHOLE_IMAGE):
            raise ValueError(f"unknown apply_to: {self.apply_to}")


# --- compositing -------------------------------------------------------------


def _transform_sprite(sprite: RasterImage, scale: float, rotation: float,
                      shear_x: float, shear_y: float) -> np.ndarray | None:
    """Scaled/sheared/rotated sprite on a tight canvas; None if it vanished."""
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, shear_x], [shear_y, 1.0]])
    m = rot @ shear @ np.array([[scale, 0.0], [0.0, scale]])
    if abs(np.linalg.det(m)) < 1e-12:
        return None

    w, h = sprite.width, sprite.height
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=float)
    mapped = corners @ m.T
    mins = mapped.min(axis=0)
    maxs = mapped.max(axis=0)
    out_w = max(1, math.ceil(maxs[0] - mins[0]))
    out_h = max(1, math.ceil(maxs[1] - mins[1]))

    inv = np.linalg.inv(m)
    shift = inv @ mins
    coeffs = (inv[0, 0], inv[0, 1], shift[0], inv[1, 0], inv[1, 1], shift[1])
    out = sprite.to_pil().transform((out_w, out_h), Image.AFFINE, coeffs, resample=Image.BILINEAR)
    arr = np.asarray(out)
    if not np.any(arr[:, :, 3] > 0):
        return None
    return arr


def _alpha_envelope(alpha: np.ndarray) -> PixelBox:
    rows = np.flatnonzero(alpha.any(axis=1))
    cols = np.flatnonzero(alpha.any(axis=0))
    return PixelBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _apply_gain(rgb: np.ndarray, brightness: float, tint: Sequence[float]) -> np.ndarray:
    gain = brightness * np.asarray(tint, dtype=np.float32)
    return np.clip(np.rint(rgb.astype(np.float32) * gain), 0, 255).astype(np.uint8)


def _blend(canvas: np.ndarray, sprite: np.ndarray, x: int, y: int) -> None:
    h, w = sprite.shape[:2]
    region = canvas[y:y + h, x:x + w]
    alpha = sprite[:, :, 3:4].astype(np.float32) / 255.0
    mixed = sprite[:, :, :3].astype(np.float32) * alpha + region[:, :, :3].astype(np.float32) * (1 - alpha)
    region[:, :, :3] = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def compose_sample(
    background: RasterImage,
    assets: Sequence[ForegroundAsset],
    placement: PlacementSpec,
    illum: IlluminationSpec,
    rng: np.random.Generator,
) -> tuple[RasterImage, list[tuple[int, NormBox]]]:
    """Composite a random number of objects onto the background.

    Returns the composited image and one (class_id, NormBox) label per
    placed object, in paint order. See the module docstring for the exact
    draw order; a PlacementError means the smallest configured scale still
    cannot fit the background.
    """
    if background.width < 32 or background.height < 32:
        raise ValueError("background must be at least 32x32")
    if not assets:
        raise ConfigError("at least one foreground asset is required")

    bg_w, bg_h = background.width, background.height
    brightness = float(rng.uniform(*illum.brightness_range))
    tint = illum.tints[int(rng.integers(0, len(illum.tints)))]
    count = int(rng.integers(placement.count_range[0], placement.count_range[1] + 1))

    canvas = background.pixels.copy()
    labels: list[tuple[int, NormBox]] = []
    placed_boxes: list[PixelBox] = []

    log_lo, log_hi = (math.log(s) for s in placement.scale_range)

    for _ in range(count):
        asset = assets[int(rng.integers(0, len(assets)))]
        sprite = None
        for attempt in range(_MAX_FIT_RETRIES):
            frac = math.exp(float(rng.uniform(log_lo, log_hi)))
            rotation = float(rng.uniform(*placement.rotation_range))
            shear_x = float(rng.uniform(*placement.shear_range))
            shear_y = float(rng.uniform(*placement.shear_range))
            scale = frac * bg_w / asset.image.width
            sprite = _transform_sprite(asset.image, scale, rotation, shear_x, shear_y)
            if sprite is not None and sprite.shape[0] <= bg_h and sprite.shape[1] <= bg_w:
                break
            # cannot fit: if even the smallest scale fails, give up
            min_scale = placement.scale_range[0] * bg_w / asset.image.width
            probe = _transform_sprite(asset.image, min_scale, rotation, shear_x, shear_y)
            if probe is None or probe.shape[0] > bg_h or probe.shape[1] > bg_w:
                raise PlacementError(
                    f"asset {asset.name!r} does not fit a {bg_w}x{bg_h} background "
                    f"even at minimum scale {placement.scale_range[0]}"
                )
            sprite = None
        if sprite is None:
            raise PlacementError(f"no fitting transform found for asset {asset.name!r}")

        if illum.apply_to == APPLY_FOREGROUND_ONLY:
            sprite = sprite.copy()
            sprite[:, :, :3] = _apply_gain(sprite[:, :, :3], brightness, tint)

        sp_h, sp_w = sprite.shape[:2]
        envelope = _alpha_envelope(sprite[:, :, 3])
        placed = False
        for attempt in range(_MAX_OVERLAP_RETRIES):
            x = int(rng.integers(0, bg_w - sp_w + 1))
            y = int(rng.integers(0, bg_h - sp_h + 1))
            box = PixelBox(
                envelope.x_min + x, envelope.y_min + y, envelope.x_max + x, envelope.y_max + y
            )
            if placement.allow_overlap or all(b.intersect(box) is None for b in placed_boxes):
                placed = True
                break
        if not placed:
            continue  # crowded frame; skip this object

        if box.area < MIN_BOX_AREA_PX:
            continue
        _blend(canvas, sprite, x, y)
        placed_boxes.append(box)
        labels.append((asset.class_id, norm_from_pixel(box, bg_w, bg_h)))

    if illum.apply_to == APPLY_WHOLE_IMAGE:
        canvas[:, :, :3] = _apply_gain(canvas[:, :, :3], brightness, tint)

    return RasterImage(canvas), labels


# --- augmentation ------------------------------------------------------------


OP_ROT90_CW = "rot90cw"
OP_ROT90_CCW = "rot90ccw"
OP_ROT180 = "rot180"


def shear_op(hx: float, hy: float) -> tuple[str, float, float]:
    return ("shear", float(hx), float(hy))


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    op: str
    image: RasterImage
    labels: tuple[tuple[int, NormBox], ...]
    dropped_boxes: int = 0


def _rotate_labels(labels, mapper):
    return tuple(
        (class_id, NormBox(*mapper(b))) for class_id, b in labels
    )


def augment(
    image: RasterImage,
    labels: Sequence[tuple[int, NormBox]],
    ops: Iterable[str | tuple[str, float, float]],
    rng: np.random.Generator | None = None,
) -> list[AugmentedSample]:
    """One augmented copy per op, labels transformed consistently.

    Rotations map boxes through the exact corner mapping; shear takes the
    envelope of the four sheared corners on the expanded canvas, clamps it,
    and drops boxes whose remaining area falls below 4 square pixels
    (reported in dropped_boxes). The built-in ops are deterministic; rng is
    accepted for future randomized ops.
    """
    del rng
    out = []
    for op in ops:
        if op == OP_ROT90_CW:
            img = RasterImage(np.ascontiguousarray(np.rot90(image.pixels, k=-1)))
            new = _rotate_labels(labels, lambda b: (1 - b.cy, b.cx, b.h, b.w))
            out.append(AugmentedSample(OP_ROT90_CW, img, new))
        elif op == OP_ROT90_CCW:
            img = RasterImage(np.ascontiguousarray(np.rot90(image.pixels, k=1)))
            new = _rotate_labels(labels, lambda b: (b.cy, 1 - b.cx, b.h, b.w))
            out.append(AugmentedSample(OP_ROT90_CCW, img, new))
        elif op == OP_ROT180:
            img = RasterImage(np.ascontiguousarray(np.rot90(image.pixels, k=2)))
            new = _rotate_labels(labels, lambda b: (1 - b.cx, 1 - b.cy, b.w, b.h))
            out.append(AugmentedSample(OP_ROT180, img, new))
        elif isinstance(op, tuple) and len(op) == 3 and op[0] == "shear":
            out.append(_shear_sample(image, labels, op[1], op[2]))
        else:
            raise ValueError(f"unknown augmentation op: {op!r}")
    return out


def _shear_sample(image: RasterImage, labels, hx: float, hy: float) -> AugmentedSample:
    det = 1.0 - hx * hy
    if abs(det) < 1e-9:
        raise RangeError(f"singular shear (hx={hx}, hy={hy})")
    w, h = image.width, image.height
    m = np.array([[1.0, hx], [hy, 1.0]])
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=float)
    mapped = corners @ m.T
    mins = mapped.min(axis=0)
    maxs = mapped.max(axis=0)
    out_w = max(1, math.ceil(maxs[0] - mins[0]))
    out_h = max(1, math.ceil(maxs[1] - mins[1]))

    if hx == 0 and hy == 0:
        img = image
    else:
        inv = np.linalg.inv(m)
        shift = inv @ mins
        coeffs = (inv[0, 0], inv[0, 1], shift[0], inv[1, 0], inv[1, 1], shift[1])
        out = image.to_pil().transform((out_w, out_h), Image.AFFINE, coeffs, resample=Image.BILINEAR)
        img = RasterImage(np.asarray(out))

    new_labels = []
    dropped = 0
    for class_id, box in labels:
        px = box_to_corners_px(box, w, h) @ m.T - mins
        x0, y0 = px.min(axis=0)
        x1, y1 = px.max(axis=0)
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(float(out_w), x1), min(float(out_h), y1)
        if x1 - x0 <= 0 or y1 - y0 <= 0 or (x1 - x0) * (y1 - y0) < MIN_BOX_AREA_PX:
            dropped += 1
            continue
        new_labels.append((class_id, norm_from_pixel(PixelBox(x0, y0, x1, y1), out_w, out_h)))
    op_name = f"shear({hx:g},{hy:g})"
    return AugmentedSample(op_name, img, tuple(new_labels), dropped)


def box_to_corners_px(box: NormBox, width: int, height: int) -> np.ndarray:
    """The four pixel-space corners of a normalized box, shape (4, 2)."""
    x0 = (box.cx - box.w / 2) * width
    x1 = (box.cx + box.w / 2) * width
    y0 = (box.cy - box.h / 2) * height
    y1 = (box.cy + box.h / 2) * height
    return np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])


# --- dataset generation -------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    image_path: str
    label_path: str
    width: int
    height: int
    objects: tuple[tuple[int, NormBox], ...]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    train_split: float
    content_hash: str

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "train_split": self.train_split,
            "content_hash": self.content_hash,
            "entries": [
                {
                    "split": e.split,
                    "image": e.image_path,
                    "label": e.label_path,
                    "width": e.width,
                    "height": e.height,
                    "objects": [
                        {"class_id": c, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                        for c, b in e.objects
                    ],
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="ascii")

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="ascii"))
        entries = tuple(
            ManifestEntry(
                split=e["split"],
                image_path=e["image"],
                label_path=e["label"],
                width=e["width"],
                height=e["height"],
                objects=tuple(
                    (o["class_id"], NormBox(o["cx"], o["cy"], o["w"], o["h"]))
                    for o in e["objects"]
                ),
            )
            for e in doc["entries"]
        )
        return DatasetManifest(entries, doc["seed"], doc["train_split"], doc["content_hash"])


def load_assets(asset_dir: str | Path) -> list[ForegroundAsset]:
    """PNG sprites from a directory, class ids assigned by sorted filename order.

    A file named like ``3_button.png`` takes class id 3 from the prefix;
    otherwise ids follow the sort order.
    """
    asset_dir = Path(asset_dir)
    paths = sorted(asset_dir.glob("*.png"))
    assets = []
    for i, path in enumerate(paths):
        try:
            image = RasterImage.load(path)
            stem = path.stem
            class_id = i
            head = stem.split("_", 1)[0]
            if head.isdigit():
                class_id = int(head)
            assets.append(ForegroundAsset(image, class_id, stem))
        except (OSError, ValueError) as exc:
            raise AssetError(f"unreadable asset {path}: {exc}") from exc
    return assets


def load_background_paths(background_dir: str | Path) -> list[Path]:
    background_dir = Path(background_dir)
    paths = sorted(
        p for p in background_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    return paths


def generate_dataset(
    out_dir: str | Path,
    asset_dir: str | Path,
    background_dir: str | Path,
    placement: PlacementSpec,
    illumination: IlluminationSpec,
    n_images: int,
    train_split: float,
    seed: int,
) -> DatasetManifest:
    """Write images, label files, and a manifest under out_dir.

    Layout: train/images, train/labels, val/images, val/labels, and
    manifest.json at the root. The content hash covers all image and label
    bytes in entry order; the same seed always reproduces it.
    """
    if n_images < 0:
        raise ConfigError("n_images must be >= 0")
    if not 0 <= train_split <= 1:
        raise ConfigError("train_split must lie in [0, 1]")
    assets = load_assets(asset_dir)
    if not assets:
        raise ConfigError(f"no .png assets found in {asset_dir}")
    bg_paths = load_background_paths(background_dir)
    if not bg_paths:
        raise ConfigError(f"no background images found in {background_dir}")

    out_dir = Path(out_dir)
    for split in ("train", "val"):
        (out_dir / split / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / split / "labels").mkdir(parents=True, exist_ok=True)

    backgrounds: dict[Path, RasterImage] = {}
    n_train = round(n_images * train_split)
    hasher = hashlib.sha256()
    entries = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        bg_path = bg_paths[int(rng.integers(0, len(bg_paths)))]
        if bg_path not in backgrounds:
            try:
                backgrounds[bg_path] = RasterImage.load(bg_path)
            except OSError as exc:
                raise AssetError(f"unreadable background {bg_path}: {exc}") from exc
        image, labels = compose_sample(backgrounds[bg_path], assets, placement, illumination, rng)

        split = "train" if i < n_train else "val"
        name = f"img_{i:05d}"
        image_rel = f"{split}/images/{name}.png"
        label_rel = f"{split}/labels/{name}.txt"
        quantized = [(c, b.quantized()) for c, b in labels]

        png = image.png_bytes()
        label_bytes = labels_to_bytes(quantized)
        (out_dir / image_rel).write_bytes(png)
        (out_dir / label_rel).write_bytes(label_bytes)
        hasher.update(png)
        hasher.update(label_bytes)
        entries.append(
            ManifestEntry(split, image_rel, label_rel, image.width, image.height, tuple(quantized))
        )

    manifest = DatasetManifest(tuple(entries), seed, train_split, hasher.hexdigest())
    manifest.save(out_dir / "manifest.json")
    return manifest


def verify_manifest_roundtrip(out_dir: str | Path, manifest: DatasetManifest) -> bool:
    """True iff every label file parses back to exactly its manifest records."""
    out_dir = Path(out_dir)
    for entry in manifest.entries:
        text = (out_dir / entry.label_path).read_text(encoding="ascii")
        if tuple(parse_label_text(text)) != entry.objects:
            return False
    return True


# --- 3D label projection ------------------------------------------------------


SKIP_BEHIND_CAMERA = "behind_camera"
SKIP_OUTSIDE_FRAME = "outside_frame"
SKIP_DEGENERATE_FRAME = "degenerate_frame"


@dataclass(frozen=True)
class ViewpointLabel:
    pose_index: int
    class_id: int
    box: NormBox | None
    skipped: str | None = None


def render_labels_for_viewpoints(
    box: Box3D,
    intr: CameraIntrinsics,
    poses: Sequence[CameraPose],
    class_id: int,
) -> list[ViewpointLabel]:
    """Project the box for every pose; unusable poses are skipped, not fatal."""
    out = []
    for i, pose in enumerate(poses):
        try:
            extr = extrinsics_from_pose(pose)
            pixel = project_box3(intr, extr, box)
            norm = norm_from_pixel(pixel, intr.width, intr.height)
        except BehindCamera:
            out.append(ViewpointLabel(i, class_id, None, SKIP_BEHIND_CAMERA))
            continue
        except (OutsideFrame, RangeError):
            out.append(ViewpointLabel(i, class_id, None, SKIP_OUTSIDE_FRAME))
            continue
        except DegenerateFrame:
            out.append(ViewpointLabel(i, class_id, None, SKIP_DEGENERATE_FRAME))
            continue
        out.append(ViewpointLabel(i, class_id, norm))
    return out
