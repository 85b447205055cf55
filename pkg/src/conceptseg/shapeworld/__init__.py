from .scenes import (
    COLORS,
    SHAPES,
    SIZES,
    GenConfig,
    GenerationError,
    Scene,
    ShapeInstance,
    generate_scene,
    instance_raster,
    render_image,
    visible_masks,
)
from .queries import (
    ABSTAIN_TEXT,
    MARKER_CLOSE,
    MARKER_OPEN,
    AnnotationError,
    HierAnnotation,
    Predicate,
    SceneQuery,
    generate_query,
    predicate_selects,
    render_gt_masks,
    serialize_response,
)
from .video import VideoClip, clip_displacements, generate_clip, motion_label
from .dataset import Dataset, ParseError, Sample, generate_dataset, read_dataset, rebuild_clip, write_dataset

__all__ = [
    "ABSTAIN_TEXT",
    "AnnotationError",
    "COLORS",
    "Dataset",
    "GenConfig",
    "GenerationError",
    "HierAnnotation",
    "MARKER_CLOSE",
    "MARKER_OPEN",
    "ParseError",
    "Predicate",
    "SHAPES",
    "SIZES",
    "Sample",
    "Scene",
    "SceneQuery",
    "ShapeInstance",
    "VideoClip",
    "clip_displacements",
    "generate_clip",
    "generate_dataset",
    "generate_query",
    "generate_scene",
    "instance_raster",
    "motion_label",
    "predicate_selects",
    "read_dataset",
    "rebuild_clip",
    "render_gt_masks",
    "render_image",
    "serialize_response",
    "visible_masks",
    "write_dataset",
]
