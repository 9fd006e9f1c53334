"""Run configuration: YAML file with strict unknown-key rejection.

Every key is optional and falls back to the defaults below; an unknown key
anywhere in the tree fails loudly with its full path, so a typo in an
experiment config can never pass silently. Angles in the viewpoints
section are written in degrees for readability and converted to radians
when the sampling spec is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .detector import DetectorConfig, MockDetectorModel
from .errors import ConfigError
from .geometry import Box3D, CameraIntrinsics, Vec3, ViewpointSpec
from .pipeline import PipelineConfig
from .scenario import SceneSpec
from .service import ServiceConfig
from .synthgen import DEFAULT_TINTS, IlluminationSpec, PlacementSpec


@dataclass(frozen=True)
class DatasetSection:
    asset_dir: str = "assets"
    background_dir: str = "backgrounds"
    n_images: int = 16
    train_split: float = 0.8


@dataclass(frozen=True)
class PlacementSection:
    count_range: tuple[int, int] = (1, 3)
    scale_range: tuple[float, float] = (0.08, 0.25)
    rotation_range: tuple[float, float] = (0.0, 0.0)
    shear_range: tuple[float, float] = (0.0, 0.0)
    allow_overlap: bool = True


@dataclass(frozen=True)
class IlluminationSection:
    brightness_range: tuple[float, float] = (1.0, 1.0)
    tints: tuple[tuple[float, float, float], ...] = DEFAULT_TINTS
    apply_to: str = "foreground_only"


@dataclass(frozen=True)
class CameraSection:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480


@dataclass(frozen=True)
class TargetBoxSection:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    half_extents: tuple[float, float, float] = (0.1, 0.1, 0.02)
    class_id: int = 0


@dataclass(frozen=True)
class ViewpointsSection:
    azimuth_range_deg: tuple[float, float] = (-60.0, 60.0)
    elevation_range_deg: tuple[float, float] = (15.0, 75.0)
    radius_range: tuple[float, float] = (1.0, 2.0)
    n_azimuth: int = 6
    n_elevation: int = 3
    n_radius: int = 2
    jitter_fraction: float = 0.25


@dataclass(frozen=True)
class DetectorSection:
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    input_resolution: int = 416


@dataclass(frozen=True)
class MockSection:
    loc_noise_sigma: float = 2.0
    min_detectable_px: float = 4.0
    base_miss_rate: float = 0.1
    false_positive_rate: float = 0.0
    sigma_ref: float = 8.0
    confidence_floor: float = 0.05


@dataclass(frozen=True)
class PipelineSection:
    context_class_id: int = 0
    small_class_ids: tuple[int, ...] = (1,)
    crop_margin: float = 0.10
    min_context_confidence: float = 0.25
    fallback: str = "report_none"


@dataclass(frozen=True)
class SceneSection:
    width: int = 1280
    height: int = 720
    context_area_range: tuple[float, float] = (0.22, 0.28)
    small_area_range: tuple[float, float] = (0.001, 0.005)
    small_count_range: tuple[int, int] = (2, 6)


@dataclass(frozen=True)
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 7417
    max_payload: int = 33554432
    gt_dataset: str = ""  # manifest path enabling ground-truth lookup by frame id


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    placement: PlacementSection = field(default_factory=PlacementSection)
    illumination: IlluminationSection = field(default_factory=IlluminationSection)
    camera: CameraSection = field(default_factory=CameraSection)
    target_box: TargetBoxSection = field(default_factory=TargetBoxSection)
    viewpoints: ViewpointsSection = field(default_factory=ViewpointsSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    mock: MockSection = field(default_factory=MockSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    scene: SceneSection = field(default_factory=SceneSection)
    service: ServiceSection = field(default_factory=ServiceSection)

    # --- domain object builders ------------------------------------------

    def placement_spec(self) -> PlacementSpec:
        p = self.placement
        return _build(
            PlacementSpec,
            count_range=tuple(p.count_range),
            scale_range=tuple(p.scale_range),
            rotation_range=tuple(p.rotation_range),
            shear_range=tuple(p.shear_range),
            allow_overlap=p.allow_overlap,
        )

    def illumination_spec(self) -> IlluminationSpec:
        i = self.illumination
        return _build(
            IlluminationSpec,
            brightness_range=tuple(i.brightness_range),
            tints=tuple(tuple(t) for t in i.tints),
            apply_to=i.apply_to,
        )

    def camera_intrinsics(self) -> CameraIntrinsics:
        c = self.camera
        return _build(
            CameraIntrinsics, fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy, width=c.width, height=c.height
        )

    def target_box3d(self) -> Box3D:
        t = self.target_box
        return _build(Box3D, center=Vec3(*t.center), half_extents=Vec3(*t.half_extents))

    def viewpoint_spec(self, seed: int | None = None) -> ViewpointSpec:
        v = self.viewpoints
        rad = lambda pair: (math.radians(pair[0]), math.radians(pair[1]))
        return _build(
            ViewpointSpec,
            azimuth_range=rad(v.azimuth_range_deg),
            elevation_range=rad(v.elevation_range_deg),
            radius_range=tuple(v.radius_range),
            n_azimuth=v.n_azimuth,
            n_elevation=v.n_elevation,
            n_radius=v.n_radius,
            jitter_fraction=v.jitter_fraction,
            seed=self.seed if seed is None else seed,
        )

    def detector_config(self) -> DetectorConfig:
        d = self.detector
        return _build(
            DetectorConfig,
            confidence_threshold=d.confidence_threshold,
            nms_iou_threshold=d.nms_iou_threshold,
            input_resolution=d.input_resolution,
        )

    def mock_model(self, seed: int) -> MockDetectorModel:
        m = self.mock
        return _build(
            MockDetectorModel,
            loc_noise_sigma=m.loc_noise_sigma,
            min_detectable_px=m.min_detectable_px,
            base_miss_rate=m.base_miss_rate,
            false_positive_rate=m.false_positive_rate,
            sigma_ref=m.sigma_ref,
            confidence_floor=m.confidence_floor,
            seed=seed,
        )

    def pipeline_config(self, mode: str) -> PipelineConfig:
        p = self.pipeline
        return _build(
            PipelineConfig,
            context_class_id=p.context_class_id,
            small_class_ids=frozenset(p.small_class_ids),
            crop_margin=p.crop_margin,
            min_context_confidence=p.min_context_confidence,
            fallback=p.fallback,
            mode=mode,
        )

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        return _build(
            SceneSpec,
            width=s.width,
            height=s.height,
            context_class_id=self.pipeline.context_class_id,
            small_class_id=next(iter(self.pipeline.small_class_ids)),
            context_area_range=tuple(s.context_area_range),
            small_area_range=tuple(s.small_area_range),
            small_count_range=tuple(s.small_count_range),
        )

    def service_config(self) -> ServiceConfig:
        s = self.service
        return _build(ServiceConfig, host=s.host, port=s.port, max_payload=s.max_payload)


def _build(cls, **kwargs):
    """Construct a domain object, converting its validation into ConfigError."""
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _coerce(value, default, path: str):
    if isinstance(value, list):
        return tuple(_coerce(v, None, path) for v in value)
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, tuple):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _merge(obj, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {data!r}")
    field_map = {f.name: f for f in fields(obj)}
    overrides = {}
    for key, value in data.items():
        if key not in field_map:
            raise ConfigError(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if is_dataclass(current):
            overrides[key] = _merge(current, value, f"{path}{key}.")
        else:
            overrides[key] = _coerce(value, current, f"{path}{key}")
    return replace(obj, **overrides)


def load_config(path: str | Path | None) -> RunConfig:
    """RunConfig from a YAML file; None or an empty file gives pure defaults."""
    base = RunConfig()
    if path is None:
        return base
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return base
    return _merge(base, data)


def describe_config() -> list[str]:
    """One 'key.path = default' line per configuration key."""
    lines: list[str] = []

    def walk(obj, prefix: str) -> None:
        for f in fields(obj):
            value = getattr(obj, f.name)
            if is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name} = {value!r}")

    walk(RunConfig(), "")
    return lines
