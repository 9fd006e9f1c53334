"""Pluggable detectors: a parametric ground-truth-driven mock and a remote adapter.

The mock stands in for a trained network. It is driven by ground truth and
an error model whose noise is expressed at the network's fixed input
resolution; detecting on a tighter crop therefore shrinks the error mapped
back into source-image pixels. That resolution coupling is what makes a
crop-then-detect pipeline outperform whole-frame detection on small objects.

Mock semantics, per ground-truth box of a served class:

1. The box is mapped to network-input scale with the letterbox factor
   ``input_resolution / max(image width, image height)``; its network-scale
   side is ``min(box width, box height) * factor``.
2. The box is dropped with probability ``base_miss_rate``, combined
   independently with a size-driven miss ramp: 0 at side >=
   ``min_detectable_px``, rising linearly to 1 at ``min_detectable_px / 2``
   and below.
3. Surviving boxes get independent Gaussian noise per edge with
   ``loc_noise_sigma`` network pixels, mapped back to image coordinates.
4. Confidence is ``clamp(1 - mean(|edge noise|)/sigma_ref, confidence_floor, 1)``.
5. ``Poisson(false_positive_rate)`` false detections are added with uniform
   boxes and confidence uniform in (0, 2 * confidence_threshold).
6. The result is filtered by the confidence threshold and per-class NMS.

Detections are a pure function of (model, frame id, stream, ground truth);
the stream number lets a pipeline decorrelate its two stages on one frame.
"""

from __future__ import annotations

import io
import socket
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import wire
from .errors import DetectorUnavailable, MissingGroundTruth, ProtocolError
from .geometry import NormBox, PixelBox, iou, norm_from_pixel, pixel_from_norm


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: NormBox
    confidence: float

    def __post_init__(self):
        if not 0 <= self.confidence <= 1:
            raise ValueError(f"confidence must lie in [0, 1]: {self.confidence}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative: {self.class_id}")


@dataclass(frozen=True)
class DetectorConfig:
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    input_resolution: int = 416

    def __post_init__(self):
        if not 0 <= self.confidence_threshold <= 1:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if not 0 < self.nms_iou_threshold <= 1:
            raise ValueError("nms_iou_threshold must lie in (0, 1]")
        if self.input_resolution <= 0:
            raise ValueError("input_resolution must be positive")


@dataclass(frozen=True)
class MockDetectorModel:
    """Error model for the mock detector; input resolution lives in DetectorConfig."""

    loc_noise_sigma: float = 0.0  # pixels at network-input scale
    min_detectable_px: float = 0.0  # network-scale side where the miss ramp starts
    base_miss_rate: float = 0.0
    false_positive_rate: float = 0.0  # expected false positives per image
    sigma_ref: float = 8.0  # confidence law reference error, network pixels
    confidence_floor: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.loc_noise_sigma < 0:
            raise ValueError("loc_noise_sigma must be >= 0")
        for name, rate in (("base_miss_rate", self.base_miss_rate),):
            if not 0 <= rate <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if self.sigma_ref <= 0:
            raise ValueError("sigma_ref must be positive")
        if not 0 <= self.confidence_floor <= 1:
            raise ValueError("confidence_floor must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class GroundTruthFrame:
    width: int
    height: int
    objects: tuple[tuple[int, NormBox], ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame dimensions must be positive")


@dataclass(frozen=True)
class Frame:
    """What a detector sees: dimensions, an id, and optionally pixel data."""

    frame_id: int
    width: int
    height: int
    pixels: np.ndarray | None = None  # (height, width, 3) uint8 when present


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited in descending confidence (stable for ties); one
    is kept iff its IoU with every already-kept detection of the same class
    is below the threshold. The kept list stays in descending confidence.
    """
    ordered = sorted(dets, key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for d in ordered:
        if all(
            k.class_id != d.class_id or iou(d.box, k.box) < iou_threshold for k in kept
        ):
            kept.append(d)
    return kept


def _miss_probability(model: MockDetectorModel, net_side: float) -> float:
    if model.min_detectable_px <= 0:
        size_miss = 0.0
    elif net_side >= model.min_detectable_px:
        size_miss = 0.0
    elif net_side <= model.min_detectable_px / 2:
        size_miss = 1.0
    else:
        half = model.min_detectable_px / 2
        size_miss = (model.min_detectable_px - net_side) / half
    return 1.0 - (1.0 - model.base_miss_rate) * (1.0 - size_miss)


class MockDetector:
    """Ground-truth-driven detector oracle; see the module docstring for semantics."""

    def __init__(
        self,
        model: MockDetectorModel,
        config: DetectorConfig = DetectorConfig(),
        classes: Iterable[int] = (0,),
    ):
        self.model = model
        self.config = config
        self.classes = frozenset(classes)
        if not self.classes:
            raise ValueError("a detector must serve at least one class")

    def detect(
        self,
        frame: Frame,
        gt: GroundTruthFrame | None = None,
        stream: int = 0,
    ) -> list[Detection]:
        if gt is None:
            raise MissingGroundTruth("the mock detector needs ground truth for the frame")
        model = self.model
        config = self.config
        rng = np.random.default_rng([model.seed, frame.frame_id, stream])
        factor = config.input_resolution / max(gt.width, gt.height)

        candidates: list[Detection] = []
        for class_id, box in gt.objects:
            if class_id not in self.classes:
                continue
            px = pixel_from_norm(box, gt.width, gt.height)
            net_side = min(px.width, px.height) * factor
            missed = rng.uniform() < _miss_probability(model, net_side)
            noise = rng.normal(0.0, model.loc_noise_sigma, size=4)
            if missed:
                continue
            if model.loc_noise_sigma == 0:
                # exact oracle: no pixel round trip, box passed through untouched
                candidates.append(Detection(class_id, box, 1.0))
                continue
            shift = noise / factor  # back to source pixels
            x0 = min(max(px.x_min + shift[0], 0.0), gt.width)
            y0 = min(max(px.y_min + shift[1], 0.0), gt.height)
            x1 = min(max(px.x_max + shift[2], 0.0), gt.width)
            y1 = min(max(px.y_max + shift[3], 0.0), gt.height)
            if x1 <= x0 or y1 <= y0:
                continue  # noise collapsed the box; counts as a miss
            loc_error = float(np.mean(np.abs(noise)))
            confidence = min(max(1.0 - loc_error / model.sigma_ref, model.confidence_floor), 1.0)
            candidates.append(
                Detection(
                    class_id,
                    norm_from_pixel(PixelBox(x0, y0, x1, y1), gt.width, gt.height),
                    confidence,
                )
            )

        n_fp = int(rng.poisson(model.false_positive_rate)) if model.false_positive_rate > 0 else 0
        class_list = sorted(self.classes)
        for _ in range(n_fp):
            class_id = class_list[int(rng.integers(0, len(class_list)))]
            w = float(rng.uniform(0.01, 0.1))
            h = float(rng.uniform(0.01, 0.1))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            conf = float(rng.uniform(0.0, min(1.0, 2 * config.confidence_threshold)))
            candidates.append(Detection(class_id, NormBox(cx, cy, w, h), conf))

        filtered = [d for d in candidates if d.confidence >= config.confidence_threshold]
        return nms(filtered, config.nms_iou_threshold)


def remote_detect(
    endpoint: tuple[str, int],
    frame_id: int,
    width: int,
    height: int,
    data: bytes,
    encoding: int,
    timeout_s: float = 1.0,
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD,
) -> list[Detection]:
    """Send one frame to a detection service and return its detections.

    Network failures (refused, unreachable, timeout) raise
    DetectorUnavailable; malformed or unexpected responses raise
    ProtocolError. A server-side ERROR message is reported as
    DetectorUnavailable carrying the server's message.
    """
    payload = wire.encode_frame(
        wire.FramePayload(frame_id, time.time_ns() // 1000, width, height, encoding, data)
    )
    try:
        with socket.create_connection(endpoint, timeout=timeout_s) as sock:
            sock.sendall(wire.encode_message(wire.MSG_FRAME, payload))
            msg_type, body = wire.read_message(sock.recv, max_payload)
    except (TimeoutError, socket.timeout, ConnectionError, OSError) as exc:
        raise DetectorUnavailable(f"detector endpoint {endpoint}: {exc}") from exc

    if msg_type == wire.MSG_ERROR:
        err = wire.decode_error(body)
        raise DetectorUnavailable(f"detector endpoint {endpoint}: server error {err.code}: {err.message}")
    if msg_type != wire.MSG_DETECTIONS:
        raise ProtocolError(f"expected DETECTIONS, got message type {msg_type}")
    dets = wire.decode_detections(body)
    try:
        return [
            Detection(r.class_id, NormBox(r.cx, r.cy, r.w, r.h), min(max(r.confidence, 0.0), 1.0))
            for r in dets.detections
        ]
    except ValueError as exc:
        raise ProtocolError(f"invalid detection record: {exc}") from exc


class RemoteDetector:
    """Detector facade that offloads each frame to a remote service."""

    def __init__(
        self,
        endpoint: tuple[str, int],
        config: DetectorConfig = DetectorConfig(),
        encoding: int = wire.ENC_RAW_RGB8,
        timeout_s: float = 1.0,
    ):
        self.endpoint = endpoint
        self.config = config
        self.encoding = encoding
        self.timeout_s = timeout_s

    def detect(
        self,
        frame: Frame,
        gt: GroundTruthFrame | None = None,
        stream: int = 0,
    ) -> list[Detection]:
        del gt, stream  # resolved server side
        if frame.pixels is None:
            raise ValueError("RemoteDetector needs pixel data on the frame")
        if self.encoding == wire.ENC_RAW_RGB8:
            data = np.ascontiguousarray(frame.pixels).tobytes()
        else:
            from PIL import Image

            buf = io.BytesIO()
            Image.fromarray(frame.pixels, mode="RGB").save(buf, format="JPEG")
            data = buf.getvalue()
        return remote_detect(
            self.endpoint,
            frame.frame_id,
            frame.width,
            frame.height,
            data,
            self.encoding,
            self.timeout_s,
        )
