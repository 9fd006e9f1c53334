"""Detection quality metrics: matching, precision/recall, AP and mAP.

Average precision uses all-point interpolation by default (the integral of
max-precision-at-recall>=r over recall); an 11-point mode is available for
comparability with older tooling. mAP at a threshold is the unweighted mean
of AP over the classes that actually appear in the ground truth; classes
without ground truth have no defined AP and are reported as absent rather
than zero.

Ground-truth records may carry ``box=None``: the object exists (and counts
toward recall) but cannot be matched in the current coordinate frame. This
is how evaluation in crop coordinates accounts for objects that the first
stage cropped away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .errors import ConfigError
from .geometry import NormBox, iou

if TYPE_CHECKING:  # pragma: no cover
    from .detector import Detection

SMALL_AREA_MIN = 0.0008
SMALL_AREA_MAX = 0.0058

INTERPOLATION_MODES = ("all_point", "eleven_point")


def is_small_object(box: NormBox) -> bool:
    """True iff the box covers between 0.08% and 0.58% of the image, inclusive."""
    return SMALL_AREA_MIN <= box.area <= SMALL_AREA_MAX


@dataclass(frozen=True)
class GTObject:
    """One ground-truth object; ``small`` is resolved from the box by default."""

    class_id: int
    box: NormBox | None
    small: bool | None = None

    def __post_init__(self):
        if self.small is None:
            if self.box is None:
                raise ValueError("GTObject with box=None needs an explicit small flag")
            object.__setattr__(self, "small", is_small_object(self.box))


@dataclass(frozen=True)
class GTFrame:
    width: int
    height: int
    objects: tuple[GTObject, ...]


@dataclass(frozen=True)
class GroundTruthSet:
    frames: dict[int, GTFrame]

    @classmethod
    def from_frames(cls, frames: Mapping[int, object]) -> "GroundTruthSet":
        """Build from any mapping of frame_id to (width, height, objects) records,
        where objects is an iterable of (class_id, NormBox) pairs."""
        out = {}
        for frame_id, f in frames.items():
            out[frame_id] = GTFrame(
                f.width, f.height, tuple(GTObject(cid, box) for cid, box in f.objects)
            )
        return cls(out)

    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted({o.class_id for f in self.frames.values() for o in f.objects}))

    def restrict(self, classes: Iterable[int]) -> "GroundTruthSet":
        keep = set(classes)
        return GroundTruthSet(
            {
                fid: GTFrame(f.width, f.height, tuple(o for o in f.objects if o.class_id in keep))
                for fid, f in self.frames.items()
            }
        )

    def total_objects(self) -> int:
        return sum(len(f.objects) for f in self.frames.values())


@dataclass(frozen=True)
class DetectionSet:
    frames: dict[int, tuple["Detection", ...]]

    def restrict(self, classes: Iterable[int]) -> "DetectionSet":
        keep = set(classes)
        return DetectionSet(
            {fid: tuple(d for d in dets if d.class_id in keep) for fid, dets in self.frames.items()}
        )


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    confidence: float


@dataclass(frozen=True)
class MatchResult:
    """Per-frame, per-class matching at one IoU threshold."""

    true_positives: tuple[tuple["Detection", int, float], ...]  # (det, gt index, iou)
    false_positives: tuple["Detection", ...]
    false_negatives: tuple[int, ...]  # unmatched gt indices


def _ranked_matching(gt_objects, detections, class_id, threshold):
    """Greedy matching in confidence order.

    Returns (records, gt_indices): records are
    (det, input_index, best_iou, matched_gt_index or None) sorted by the
    ranking rule: confidence desc, then larger best-IoU, then input order.
    """
    gt_indices = [i for i, o in enumerate(gt_objects) if o.class_id == class_id]
    dets = [(i, d) for i, d in enumerate(detections) if d.class_id == class_id]

    best_ious = {}
    for i, d in dets:
        best = 0.0
        for j in gt_indices:
            box = gt_objects[j].box
            if box is not None:
                best = max(best, iou(d.box, box))
        best_ious[i] = best

    dets.sort(key=lambda item: (-item[1].confidence, -best_ious[item[0]], item[0]))

    taken = set()
    records = []
    for i, d in dets:
        best_j, best_v = None, 0.0
        for j in gt_indices:
            if j in taken:
                continue
            box = gt_objects[j].box
            if box is None:
                continue
            v = iou(d.box, box)
            if v >= threshold and v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            taken.add(best_j)
            records.append((d, i, best_ious[i], best_j))
        else:
            records.append((d, i, best_ious[i], None))
    return records, gt_indices


def match_detections(gt_frame: GTFrame, detections: Sequence["Detection"], class_id: int,
                     iou_threshold: float) -> MatchResult:
    """Match one frame's detections of one class against its ground truth.

    Detections are ranked by confidence (ties: larger best-IoU first, then
    input order); each is greedily assigned the unmatched ground-truth box
    with the highest IoU >= threshold. Each ground-truth box matches at
    most once.
    """
    if not 0 < iou_threshold <= 1:
        raise ConfigError(f"iou threshold must lie in (0, 1]: {iou_threshold}")
    records, gt_indices = _ranked_matching(gt_frame.objects, detections, class_id, iou_threshold)
    tps = []
    fps = []
    matched = set()
    for d, _, _, gt_idx in records:
        if gt_idx is None:
            fps.append(d)
        else:
            box = gt_frame.objects[gt_idx].box
            tps.append((d, gt_idx, iou(d.box, box)))
            matched.add(gt_idx)
    fns = tuple(j for j in gt_indices if j not in matched)
    return MatchResult(tuple(tps), tuple(fps), fns)


def pr_curve(scored: Sequence[tuple[float, bool]], n_gt: int) -> list[PRPoint]:
    """PR points for a ranked (confidence, is_tp) sequence, descending confidence."""
    points = []
    tp = 0
    for k, (conf, is_tp) in enumerate(scored, start=1):
        tp += int(is_tp)
        points.append(PRPoint(recall=tp / n_gt, precision=tp / k, confidence=conf))
    return points


def average_precision(scored: Iterable[tuple[float, bool]], n_gt: int,
                      interpolation: str = "all_point") -> float:
    """AP for one class at one threshold from accumulated (confidence, is_tp) pairs.

    The pairs are (re-)sorted by confidence descending; a stable sort keeps
    any caller-imposed tie order. n_gt must be positive: AP is undefined
    without ground truth.
    """
    if n_gt <= 0:
        raise ValueError("average precision is undefined with zero ground-truth boxes")
    if interpolation not in INTERPOLATION_MODES:
        raise ConfigError(f"unknown interpolation mode: {interpolation}")
    entries = sorted(scored, key=lambda e: -e[0])
    points = pr_curve(entries, n_gt)
    if not points:
        return 0.0

    recalls = [p.recall for p in points]
    precisions = [p.precision for p in points]

    if interpolation == "eleven_point":
        total = 0.0
        for i in range(11):
            r = i / 10
            candidates = [p for rec, p in zip(recalls, precisions) if rec >= r]
            total += max(candidates) if candidates else 0.0
        return total / 11

    mrec = [0.0, *recalls, 1.0]
    mpre = [0.0, *precisions, 0.0]
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    ap = 0.0
    for i in range(1, len(mrec)):
        if mrec[i] != mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return ap


@dataclass(frozen=True)
class ClassThresholdResult:
    ap: float | None
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    """AP per class over an IoU-threshold sweep, plus the small-object subset."""

    frame_tag: str  # "full_size" or "cropped"
    thresholds: tuple[float, ...]
    classes: tuple[int, ...]
    per_class: dict[tuple[int, float], ClassThresholdResult] = field(default_factory=dict)
    map_by_threshold: dict[float, float | None] = field(default_factory=dict)
    small_ap_by_threshold: dict[float, float | None] = field(default_factory=dict)
    orphan_detection_frames: int = 0
    interpolation: str = "all_point"


def evaluate(gt: GroundTruthSet, det: DetectionSet, iou_thresholds: Sequence[float],
             frame_tag: str = "full_size", interpolation: str = "all_point") -> EvalReport:
    """Full sweep evaluation.

    Detection frames absent from the ground truth contribute pure false
    positives and are tallied in orphan_detection_frames. The small-object
    subset drops non-small ground truth together with the detections that
    matched it; unmatched detections still count as false positives there.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    if not thresholds:
        raise ConfigError("at least one IoU threshold is required")
    if any(not 0 < t <= 1 for t in thresholds):
        raise ConfigError(f"iou thresholds must lie in (0, 1]: {thresholds}")
    if list(thresholds) != sorted(thresholds):
        raise ConfigError("iou thresholds must be sorted ascending")
    if frame_tag not in ("full_size", "cropped"):
        raise ConfigError(f"unknown frame tag: {frame_tag}")

    classes = gt.class_ids()
    orphan_frames = sorted(set(det.frames) - set(gt.frames))
    all_frame_ids = sorted(set(gt.frames) | set(det.frames))
    empty = GTFrame(width=1, height=1, objects=())

    report = EvalReport(
        frame_tag=frame_tag,
        thresholds=thresholds,
        classes=classes,
        orphan_detection_frames=len(orphan_frames),
        interpolation=interpolation,
    )

    for threshold in thresholds:
        aps = []
        small_scored = []
        n_small_gt = 0
        small_tp = 0
        for class_id in classes:
            scored = []  # (confidence, best_iou, frame_id, input order, is_tp, gt small)
            n_gt = 0
            tp = fp = 0
            for frame_id in all_frame_ids:
                frame = gt.frames.get(frame_id, empty)
                dets = det.frames.get(frame_id, ())
                records, gt_indices = _ranked_matching(
                    frame.objects, dets, class_id, threshold
                )
                n_gt += len(gt_indices)
                for d, order, best_iou, gt_idx in records:
                    is_tp = gt_idx is not None
                    tp += int(is_tp)
                    fp += int(not is_tp)
                    gt_small = frame.objects[gt_idx].small if is_tp else None
                    scored.append((d.confidence, best_iou, frame_id, order, is_tp, gt_small))
            report.per_class[(class_id, threshold)] = ClassThresholdResult(
                ap=None, tp=tp, fp=fp, fn=n_gt - tp
            )
            if n_gt > 0:
                ranked = sorted(scored, key=lambda e: (-e[0], -e[1], e[2], e[3]))
                ap = average_precision(
                    [(e[0], e[4]) for e in ranked], n_gt, interpolation
                )
                report.per_class[(class_id, threshold)] = ClassThresholdResult(
                    ap=ap, tp=tp, fp=fp, fn=n_gt - tp
                )
                aps.append(ap)

            # small-object subset: keep small GT; detections matched to
            # non-small GT are excluded from the subset ranking.
            for frame_id in all_frame_ids:
                frame = gt.frames.get(frame_id, empty)
                n_small_gt += sum(
                    1 for o in frame.objects if o.class_id == class_id and o.small
                )
            for conf, best_iou, frame_id, order, is_tp, gt_small in scored:
                if is_tp and not gt_small:
                    continue
                small_scored.append((conf, best_iou, frame_id, order, is_tp))
                small_tp += int(is_tp)

        report.map_by_threshold[threshold] = (
            sum(aps) / len(aps) if aps else None
        )
        if n_small_gt > 0:
            ranked = sorted(small_scored, key=lambda e: (-e[0], -e[1], e[2], e[3]))
            report.small_ap_by_threshold[threshold] = average_precision(
                [(e[0], e[4]) for e in ranked], n_small_gt, interpolation
            )
        else:
            report.small_ap_by_threshold[threshold] = None

    return report


@dataclass(frozen=True)
class ReportComparison:
    thresholds: tuple[float, ...]
    rows: tuple[tuple[float, float | None, float | None, float | None], ...]
    # each row: (threshold, mAP a, mAP b, delta)


def compare_reports(a: EvalReport, b: EvalReport) -> ReportComparison:
    """Per-threshold mAP deltas (b relative to a is reported as b - a)."""
    if a.thresholds != b.thresholds:
        raise ConfigError(
            f"threshold lists differ: {a.thresholds} vs {b.thresholds}"
        )
    if a.classes != b.classes:
        raise ConfigError(f"class lists differ: {a.classes} vs {b.classes}")
    rows = []
    for t in a.thresholds:
        ma = a.map_by_threshold.get(t)
        mb = b.map_by_threshold.get(t)
        delta = (mb - ma) if (ma is not None and mb is not None) else None
        rows.append((t, ma, mb, delta))
    return ReportComparison(a.thresholds, tuple(rows))


def paired_sign_test(deltas: Iterable[float]) -> float:
    """One-sided sign test p-value for the hypothesis median(delta) > 0.

    Ties (exact zeros) are discarded, as usual for the sign test. The
    p-value is the exact binomial tail P(wins >= observed | p = 1/2).
    """
    wins = losses = 0
    for d in deltas:
        if d > 0:
            wins += 1
        elif d < 0:
            losses += 1
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0**n


# --- rendering --------------------------------------------------------------


def _fmt_ap(ap: float | None) -> str:
    return "absent" if ap is None else f"{ap:.6f}"


def render_report(report: EvalReport) -> str:
    lines = [f"evaluation ({report.frame_tag} frame, {report.interpolation} interpolation)"]
    lines.append(f"{'class':>6} {'IoU':>5} {'AP':>10} {'TP':>6} {'FP':>6} {'FN':>6}")
    for class_id in report.classes:
        for t in report.thresholds:
            r = report.per_class[(class_id, t)]
            lines.append(
                f"{class_id:>6} {t:>5.2f} {_fmt_ap(r.ap):>10} {r.tp:>6} {r.fp:>6} {r.fn:>6}"
            )
    lines.append(f"{'IoU':>6} {'mAP':>10} {'small-AP':>10}")
    for t in report.thresholds:
        lines.append(
            f"{t:>6.2f} {_fmt_ap(report.map_by_threshold[t]):>10}"
            f" {_fmt_ap(report.small_ap_by_threshold[t]):>10}"
        )
    if report.orphan_detection_frames:
        lines.append(f"frames with detections but no ground truth: {report.orphan_detection_frames}")
    return "\n".join(lines)


def report_records(report: EvalReport) -> str:
    """Diff-friendly TSV: one record per class and threshold."""
    lines = ["frame_tag\tclass_id\tiou\tap\ttp\tfp\tfn"]
    for class_id in report.classes:
        for t in report.thresholds:
            r = report.per_class[(class_id, t)]
            lines.append(
                f"{report.frame_tag}\t{class_id}\t{t:.2f}\t{_fmt_ap(r.ap)}\t{r.tp}\t{r.fp}\t{r.fn}"
            )
    return "\n".join(lines) + "\n"


def write_report_records(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report_records(report), encoding="ascii")


def render_comparison(cmp: ReportComparison, label_a: str = "a", label_b: str = "b") -> str:
    lines = [f"{'IoU':>6} {('mAP ' + label_a):>12} {('mAP ' + label_b):>12} {'delta':>10}"]
    for t, ma, mb, delta in cmp.rows:
        d = "absent" if delta is None else f"{delta:+.6f}"
        lines.append(f"{t:>6.2f} {_fmt_ap(ma):>12} {_fmt_ap(mb):>12} {d:>10}")
    return "\n".join(lines)
