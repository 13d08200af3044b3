"""slendereval: slenderness-aware object-detection evaluation and diagnosis.

Measures object slenderness from polygon boundaries (minimum-area rotated
rectangle), computes slenderness-stratified detection metrics, builds
bias-neutralized mixed datasets, and geometrically diagnoses label-assignment
strategies on slender objects.
"""

from .geometry import (
    AABox,
    AspectGroup,
    DegeneratePolygonError,
    GeometryError,
    OrientedBox,
    Point,
    Polygon,
    SlendernessBin,
    classify_aspect,
    classify_slenderness,
    convex_hull,
    giou,
    iou,
    iou_matrix,
    min_area_rect,
    pseudo_box,
    slenderness,
)
from .cocoio import (
    Annotation,
    Category,
    Dataset,
    DatasetError,
    Detection,
    DetectionSet,
    DistributionReport,
    ImageRecord,
    IntegrityError,
    MixConfig,
    NotAnnotatedError,
    ParseError,
    SampleRates,
    annotate_slenderness,
    dataset_to_coco,
    distribution_report,
    dump_ground_truth,
    load_detections,
    load_ground_truth,
    mix_datasets,
    sampling_weights,
    write_slenderness_csv,
    write_weights_csv,
)
from .evalcore import (
    EvalConfig,
    EvalReport,
    MatchResult,
    SlendernessAPError,
    average_precision,
    average_recall,
    evaluate,
    match_detections,
    nms,
)
from .assignlab import (
    AnchorGridConfig,
    Assignment,
    AssignmentReport,
    BorderDistances,
    DegenerateBoxError,
    GridLocation,
    assign_inbox,
    assign_iou,
    assign_nearest_center,
    build_anchors,
    build_grid,
    centerness,
    diagnose,
    slender_centerness,
)
from .synthetic import SceneSpec, generate_scenes

__version__ = "0.1.0"
