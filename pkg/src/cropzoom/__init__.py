"""Context-first crop-and-zoom small-object detection toolkit.

Modules by responsibility:

- geometry: viewpoint sampling, pinhole projection, box types, label files
- synthgen: sprite compositing, augmentation, dataset generation
- detector: mock (ground-truth-driven) and remote detectors, NMS
- pipeline: single-stage and two-stage detection flows
- metrics: IoU, matching, AP/mAP sweeps, report rendering
- scenario: procedural ground-truth scenes for benchmarks
- wire / service: binary protocol, streaming server, replay client
- config / cli: YAML run configuration and the command-line tool
"""

from .detector import (
    Detection,
    DetectorConfig,
    Frame,
    GroundTruthFrame,
    MockDetector,
    MockDetectorModel,
    RemoteDetector,
    nms,
    remote_detect,
)
from .geometry import (
    Box3D,
    CameraIntrinsics,
    CameraPose,
    NormBox,
    PixelBox,
    RigidTransform,
    Vec3,
    ViewpointSpec,
    extrinsics_from_pose,
    iou,
    norm_from_pixel,
    parse_label_file,
    pixel_from_norm,
    project_box3,
    project_point,
    sample_viewpoints,
    write_label_file,
)
from .metrics import (
    DetectionSet,
    EvalReport,
    GroundTruthSet,
    average_precision,
    compare_reports,
    evaluate,
    is_small_object,
    match_detections,
    paired_sign_test,
)
from .pipeline import (
    CropRegion,
    PipelineConfig,
    PipelineResult,
    expand_and_clamp,
    remap_to_fullframe,
    run_single_stage,
    run_two_stage,
    select_context,
)
from .synthgen import (
    DatasetManifest,
    ForegroundAsset,
    IlluminationSpec,
    PlacementSpec,
    RasterImage,
    augment,
    compose_sample,
    generate_dataset,
    render_labels_for_viewpoints,
)

__version__ = "0.1.0"
