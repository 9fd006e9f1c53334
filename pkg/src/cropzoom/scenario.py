"""Procedural ground-truth scenes: one large context object containing small parts.

These frames carry geometry only (no pixels); they exist to drive the
ground-truth-driven mock detectors in benchmarks and in single-stage vs
two-stage comparisons without rendering anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import GroundTruthFrame
from .geometry import NormBox


@dataclass(frozen=True)
class SceneSpec:
    width: int = 1280
    height: int = 720
    context_class_id: int = 0
    small_class_id: int = 1
    context_area_range: tuple[float, float] = (0.22, 0.28)  # fraction of frame area
    small_area_range: tuple[float, float] = (0.001, 0.005)
    small_count_range: tuple[int, int] = (2, 6)
    aspect_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame dimensions must be positive")
        for name, (lo, hi) in (
            ("context_area_range", self.context_area_range),
            ("small_area_range", self.small_area_range),
            ("aspect_range", self.aspect_range),
        ):
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be positive and ordered")
        lo, hi = self.small_count_range
        if lo < 0 or hi < lo:
            raise ValueError("small_count_range must be ordered and non-negative")


def _sample_box(rng, area_range, aspect_range, x_bounds, y_bounds) -> NormBox:
    """Box with area (fraction of frame) in area_range, centered inside bounds.

    Areas are sampled log-uniformly, matching the scale sampling used for
    dataset generation and weighting the hard small end of the band.
    """
    area = float(math.exp(rng.uniform(math.log(area_range[0]), math.log(area_range[1]))))
    aspect = float(rng.uniform(*aspect_range))
    w = math.sqrt(area * aspect)
    h = area / w
    x_lo = max(x_bounds[0], w / 2)
    x_hi = min(x_bounds[1], 1 - w / 2)
    y_lo = max(y_bounds[0], h / 2)
    y_hi = min(y_bounds[1], 1 - h / 2)
    if x_lo > x_hi or y_lo > y_hi:
        # bounds tighter than the box; pin to the bounds center
        cx = (x_bounds[0] + x_bounds[1]) / 2
        cy = (y_bounds[0] + y_bounds[1]) / 2
    else:
        cx = float(rng.uniform(x_lo, x_hi))
        cy = float(rng.uniform(y_lo, y_hi))
    return NormBox(cx, cy, w, h)


def sample_frame(spec: SceneSpec, rng: np.random.Generator) -> GroundTruthFrame:
    context = _sample_box(rng, spec.context_area_range, spec.aspect_range, (0.0, 1.0), (0.0, 1.0))
    objects = [(spec.context_class_id, context)]
    x_bounds = (context.cx - context.w / 2, context.cx + context.w / 2)
    y_bounds = (context.cy - context.h / 2, context.cy + context.h / 2)
    count = int(rng.integers(spec.small_count_range[0], spec.small_count_range[1] + 1))
    for _ in range(count):
        objects.append(
            (spec.small_class_id, _sample_box(rng, spec.small_area_range, spec.aspect_range, x_bounds, y_bounds))
        )
    return GroundTruthFrame(spec.width, spec.height, tuple(objects))


def sample_frames(spec: SceneSpec, n_frames: int, seed: int) -> dict[int, GroundTruthFrame]:
    """n_frames scenes keyed by frame id; deterministic for a fixed seed."""
    frames = {}
    for i in range(n_frames):
        rng = np.random.default_rng([seed, i])
        frames[i] = sample_frame(spec, rng)
    return frames


def gt_from_manifest(manifest) -> dict[int, GroundTruthFrame]:
    """Dataset manifest entries as ground-truth frames keyed by entry index."""
    return {
        i: GroundTruthFrame(e.width, e.height, tuple(e.objects))
        for i, e in enumerate(manifest.entries)
    }
