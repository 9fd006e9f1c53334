"""Single-stage and two-stage (context, then crop and zoom) detection pipelines.

The two-stage flow: detect everything on the full frame, pick the best
context detection, expand its box by a safety margin, crop, run the
small-object detector on the crop, then remap the crop detections back to
full-frame coordinates. A missed context either ends the frame with no
small-object output or falls back to whole-frame detection, depending on
configuration; both record the fallback so evaluation can attribute the
damage to the first stage.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

from .detector import Detection, Frame, GroundTruthFrame
from .errors import DegenerateCrop
from .geometry import NormBox, PixelBox, norm_from_pixel, pixel_from_norm
from .metrics import DetectionSet, GroundTruthSet, GTFrame, GTObject, is_small_object

FALLBACK_REPORT_NONE = "report_none"
FALLBACK_FULL_FRAME = "full_frame_detect"

MODE_SINGLE_STAGE = "single_stage"
MODE_TWO_STAGE = "two_stage"


@dataclass(frozen=True)
class PipelineConfig:
    context_class_id: int
    small_class_ids: frozenset[int]
    crop_margin: float = 0.10
    min_context_confidence: float = 0.25
    fallback: str = FALLBACK_REPORT_NONE
    mode: str = MODE_TWO_STAGE

    def __post_init__(self):
        object.__setattr__(self, "small_class_ids", frozenset(self.small_class_ids))
        if self.context_class_id in self.small_class_ids:
            raise ValueError("context class must not be one of the small classes")
        if self.crop_margin < 0:
            raise ValueError("crop_margin must be >= 0")
        if not 0 <= self.min_context_confidence <= 1:
            raise ValueError("min_context_confidence must lie in [0, 1]")
        if self.fallback not in (FALLBACK_REPORT_NONE, FALLBACK_FULL_FRAME):
            raise ValueError(f"unknown fallback policy: {self.fallback}")
        if self.mode not in (MODE_SINGLE_STAGE, MODE_TWO_STAGE):
            raise ValueError(f"unknown mode: {self.mode}")


@dataclass(frozen=True)
class CropRegion:
    """Integer-aligned crop rectangle within a full frame."""

    rect: PixelBox
    frame_width: int
    frame_height: int

    def __post_init__(self):
        r = self.rect
        if not (
            0 <= r.x_min <= r.x_max <= self.frame_width
            and 0 <= r.y_min <= r.y_max <= self.frame_height
        ):
            raise ValueError(f"crop rect {r} exceeds frame {self.frame_width}x{self.frame_height}")
        if r.area <= 0:
            raise ValueError("crop rect must have positive area")

    @property
    def width(self) -> int:
        return int(self.rect.width)

    @property
    def height(self) -> int:
        return int(self.rect.height)

    @staticmethod
    def full_frame(width: int, height: int) -> "CropRegion":
        return CropRegion(PixelBox(0.0, 0.0, float(width), float(height)), width, height)


@dataclass(frozen=True)
class StageTimings:
    stage1_us: int = 0
    crop_us: int = 0
    stage2_us: int = 0
    remap_us: int = 0
    total_us: int = 0


@dataclass(frozen=True)
class PipelineResult:
    context_detections: tuple[Detection, ...]
    small_detections_fullframe: tuple[Detection, ...]
    small_detections_crop: tuple[Detection, ...]
    crop_region: CropRegion | None
    timings: StageTimings
    fallback_used: bool


def select_context(dets: Sequence[Detection], config: PipelineConfig) -> Detection | None:
    """Highest-confidence context detection above the confidence floor.

    Ties go to the larger box, then to the smaller center x.
    """
    candidates = [
        d
        for d in dets
        if d.class_id == config.context_class_id
        and d.confidence >= config.min_context_confidence
    ]
    if not candidates:
        return None
    return max(candidates, key=lambda d: (d.confidence, d.box.area, -d.box.cx))


def expand_and_clamp(
    context_box: PixelBox, margin: float, frame_width: int, frame_height: int
) -> CropRegion:
    """Grow each side by margin * (box width or height), clamp, round outward."""
    dx = margin * context_box.width
    dy = margin * context_box.height
    x0 = math.floor(max(0.0, context_box.x_min - dx))
    y0 = math.floor(max(0.0, context_box.y_min - dy))
    x1 = math.ceil(min(float(frame_width), context_box.x_max + dx))
    y1 = math.ceil(min(float(frame_height), context_box.y_max + dy))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCrop(f"crop of {context_box} with margin {margin} is empty")
    return CropRegion(PixelBox(float(x0), float(y0), float(x1), float(y1)), frame_width, frame_height)


def remap_to_fullframe(det: Detection, region: CropRegion) -> Detection:
    """Map a detection from crop-normalized to full-frame-normalized coordinates."""
    crop_px = pixel_from_norm(det.box, region.width, region.height)
    full_px = PixelBox(
        crop_px.x_min + region.rect.x_min,
        crop_px.y_min + region.rect.y_min,
        crop_px.x_max + region.rect.x_min,
        crop_px.y_max + region.rect.y_min,
    )
    return Detection(
        det.class_id,
        norm_from_pixel(full_px, region.frame_width, region.frame_height),
        det.confidence,
    )


def map_to_crop(det: Detection, region: CropRegion) -> Detection:
    """Inverse of remap_to_fullframe; the detection must lie inside the crop."""
    full_px = pixel_from_norm(det.box, region.frame_width, region.frame_height)
    crop_px = PixelBox(
        full_px.x_min - region.rect.x_min,
        full_px.y_min - region.rect.y_min,
        full_px.x_max - region.rect.x_min,
        full_px.y_max - region.rect.y_min,
    )
    return Detection(det.class_id, norm_from_pixel(crop_px, region.width, region.height), det.confidence)


def crop_ground_truth(gt: GroundTruthFrame, region: CropRegion) -> GroundTruthFrame:
    """Ground truth as seen inside a crop: boxes intersected and re-normalized.

    Objects entirely outside the crop disappear, exactly as they would for a
    detector that never sees those pixels.
    """
    objects = []
    for class_id, box in gt.objects:
        px = pixel_from_norm(box, gt.width, gt.height)
        inter = px.intersect(region.rect)
        if inter is None or inter.area <= 0:
            continue
        shifted = PixelBox(
            inter.x_min - region.rect.x_min,
            inter.y_min - region.rect.y_min,
            inter.x_max - region.rect.x_min,
            inter.y_max - region.rect.y_min,
        )
        objects.append((class_id, norm_from_pixel(shifted, region.width, region.height)))
    return GroundTruthFrame(region.width, region.height, tuple(objects))


def _crop_pixels(frame: Frame, region: CropRegion) -> Frame:
    pixels = None
    if frame.pixels is not None:
        r = region.rect
        pixels = frame.pixels[int(r.y_min):int(r.y_max), int(r.x_min):int(r.x_max)]
    return Frame(frame.frame_id, region.width, region.height, pixels)


def _us(t0: int, t1: int) -> int:
    return (t1 - t0) // 1000


def run_two_stage(
    frame: Frame,
    stage1,
    stage2,
    config: PipelineConfig,
    gt: GroundTruthFrame | None = None,
) -> PipelineResult:
    """Context detect, crop, small-object detect, remap.

    Ground truth, when given, is forwarded to the detectors (the mock needs
    it); the crop stage sees it intersected with the crop rectangle.
    """
    if config.mode != MODE_TWO_STAGE:
        raise ValueError("run_two_stage requires mode=two_stage")
    t_start = time.perf_counter_ns()

    t0 = time.perf_counter_ns()
    context_dets = tuple(stage1.detect(frame, gt, stream=1))
    stage1_us = _us(t0, time.perf_counter_ns())

    context = select_context(context_dets, config)
    region: CropRegion | None = None
    fallback_used = False
    crop_us = 0

    if context is not None:
        t0 = time.perf_counter_ns()
        ctx_px = pixel_from_norm(context.box, frame.width, frame.height)
        try:
            region = expand_and_clamp(ctx_px, config.crop_margin, frame.width, frame.height)
        except DegenerateCrop:
            region = None
            fallback_used = True
        crop_us = _us(t0, time.perf_counter_ns())
    else:
        fallback_used = True

    stage2_us = 0
    remap_us = 0
    crop_dets: tuple[Detection, ...] = ()
    full_dets: tuple[Detection, ...] = ()

    if region is None and fallback_used and config.fallback == FALLBACK_FULL_FRAME:
        region = CropRegion.full_frame(frame.width, frame.height)

    if region is not None:
        crop_frame = _crop_pixels(frame, region)
        crop_gt = crop_ground_truth(gt, region) if gt is not None else None
        t0 = time.perf_counter_ns()
        crop_dets = tuple(stage2.detect(crop_frame, crop_gt, stream=2))
        stage2_us = _us(t0, time.perf_counter_ns())

        t0 = time.perf_counter_ns()
        full_dets = tuple(remap_to_fullframe(d, region) for d in crop_dets)
        remap_us = _us(t0, time.perf_counter_ns())

    total_us = _us(t_start, time.perf_counter_ns())
    return PipelineResult(
        context_detections=context_dets,
        small_detections_fullframe=full_dets,
        small_detections_crop=crop_dets,
        crop_region=region,
        timings=StageTimings(stage1_us, crop_us, stage2_us, remap_us, total_us),
        fallback_used=fallback_used,
    )


def run_single_stage(
    frame: Frame,
    detectors: Sequence,
    config: PipelineConfig,
    gt: GroundTruthFrame | None = None,
) -> PipelineResult:
    """All detectors on the full frame, results merged; no crop stage."""
    if config.mode != MODE_SINGLE_STAGE:
        raise ValueError("run_single_stage requires mode=single_stage")
    t_start = time.perf_counter_ns()

    t0 = time.perf_counter_ns()
    merged: list[Detection] = []
    for det in detectors:
        merged.extend(det.detect(frame, gt, stream=1))
    stage1_us = _us(t0, time.perf_counter_ns())

    context_dets = tuple(d for d in merged if d.class_id == config.context_class_id)
    small_dets = tuple(d for d in merged if d.class_id in config.small_class_ids)
    total_us = _us(t_start, time.perf_counter_ns())
    return PipelineResult(
        context_detections=context_dets,
        small_detections_fullframe=small_dets,
        small_detections_crop=(),
        crop_region=None,
        timings=StageTimings(stage1_us=stage1_us, total_us=total_us),
        fallback_used=False,
    )


# --- evaluation set builders -------------------------------------------------


def fullframe_sets(
    frames: Mapping[int, GroundTruthFrame],
    results: Mapping[int, PipelineResult],
    classes: Sequence[int] | None = None,
) -> tuple[GroundTruthSet, DetectionSet]:
    """Ground truth and small-object detections in full-frame coordinates."""
    gt = GroundTruthSet.from_frames(frames)
    det = DetectionSet({fid: r.small_detections_fullframe for fid, r in results.items()})
    if classes is not None:
        gt = gt.restrict(classes)
        det = det.restrict(classes)
    return gt, det


def cropframe_sets(
    frames: Mapping[int, GroundTruthFrame],
    results: Mapping[int, PipelineResult],
    small_class_ids: Sequence[int],
) -> tuple[GroundTruthSet, DetectionSet]:
    """Ground truth and detections in crop coordinates.

    Objects the crop missed (or whole frames without a crop) stay in the
    ground truth as unmatchable entries, so first-stage mistakes surface as
    false negatives. Smallness is judged on the original full-frame box.
    """
    keep = set(small_class_ids)
    gt_frames: dict[int, GTFrame] = {}
    det_frames: dict[int, tuple[Detection, ...]] = {}
    for fid, frame in frames.items():
        result = results.get(fid)
        region = result.crop_region if result is not None else None
        objects = []
        for class_id, box in frame.objects:
            if class_id not in keep:
                continue
            small = is_small_object(box)
            cropped: NormBox | None = None
            if region is not None:
                px = pixel_from_norm(box, frame.width, frame.height)
                inter = px.intersect(region.rect)
                if inter is not None and inter.area > 0:
                    shifted = PixelBox(
                        inter.x_min - region.rect.x_min,
                        inter.y_min - region.rect.y_min,
                        inter.x_max - region.rect.x_min,
                        inter.y_max - region.rect.y_min,
                    )
                    cropped = norm_from_pixel(shifted, region.width, region.height)
            objects.append(GTObject(class_id, cropped, small=small))
        if region is not None:
            gt_frames[fid] = GTFrame(region.width, region.height, tuple(objects))
            det_frames[fid] = result.small_detections_crop
        else:
            gt_frames[fid] = GTFrame(frame.width, frame.height, tuple(objects))
            det_frames[fid] = ()
    return GroundTruthSet(gt_frames), DetectionSet(det_frames)
