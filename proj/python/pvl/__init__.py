from ._core import (
    ParseError,
    RuntimeError,
    ValidationError,
    VersionError,
    average_precision,
    bev_iou,
    cli,
    confidence_target,
    decode_residual,
    detect,
    encode_residual,
    fps,
    gen_scene,
    iou_3d,
    nms,
    points_in_box,
)

__all__ = [
    "ParseError",
    "RuntimeError",
    "ValidationError",
    "VersionError",
    "average_precision",
    "bev_iou",
    "cli",
    "confidence_target",
    "decode_residual",
    "detect",
    "encode_residual",
    "fps",
    "gen_scene",
    "iou_3d",
    "nms",
    "points_in_box",
]
