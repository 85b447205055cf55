from .masks import (
    BinaryMask,
    RleMask,
    MalformedRleError,
    ShapeError,
    mask_iou,
    mask_union,
    rle_decode,
    rle_encode,
)
from .losses import bce_with_logits, soft_dice
from .assignment import Assignment, CostMatrix, InvalidCostError, hungarian_assign

__all__ = [
    "Assignment",
    "BinaryMask",
    "CostMatrix",
    "InvalidCostError",
    "MalformedRleError",
    "RleMask",
    "ShapeError",
    "bce_with_logits",
    "hungarian_assign",
    "mask_iou",
    "mask_union",
    "rle_decode",
    "rle_encode",
    "soft_dice",
]
