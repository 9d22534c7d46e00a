"""Box containers and plain-numpy box geometry.

Boxes are (cx, cy, w, h) normalized to [0, 1].  The differentiable GIoU used
inside the detection loss lives in `detector`; everything here is graph-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class BoxSet:
    """Aligned boxes / class ids / optional confidence scores."""

    boxes: np.ndarray  # (n, 4) cxcywh in [0, 1]
    classes: np.ndarray  # (n,) int
    scores: np.ndarray | None = None  # (n,) in [0, 1]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if len(self.classes) != n or (self.scores is not None and len(self.scores) != n):
            raise ContractError(
                f"box/class/score lengths differ: {n}/{len(self.classes)}"
                f"/{None if self.scores is None else len(self.scores)}"
            )
        if n and (self.boxes[:, 2:] <= 0).any():
            raise ContractError("boxes must have positive width and height")

    def __len__(self):
        return len(self.boxes)

    @staticmethod
    def empty() -> "BoxSet":
        return BoxSet(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def copy(self) -> "BoxSet":
        return BoxSet(
            self.boxes.copy(),
            self.classes.copy(),
            None if self.scores is None else self.scores.copy(),
        )

    def flip_horizontal(self) -> "BoxSet":
        out = self.copy()
        if len(out):
            out.boxes[:, 0] = 1.0 - out.boxes[:, 0]
        return out


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between cxcywh box arrays (n, 4) x (m, 4) -> (n, m)."""
    xa = cxcywh_to_xyxy(a)[:, None, :]
    xb = cxcywh_to_xyxy(b)[None, :, :]
    lo = np.maximum(xa[..., :2], xb[..., :2])
    hi = np.minimum(xa[..., 2:], xb[..., 2:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    area_a = np.prod(xa[..., 2:] - xa[..., :2], axis=-1)
    area_b = np.prod(xb[..., 2:] - xb[..., :2], axis=-1)
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU (IoU minus hull penalty), in (-1, 1]."""
    xa = cxcywh_to_xyxy(a)[:, None, :]
    xb = cxcywh_to_xyxy(b)[None, :, :]
    lo = np.maximum(xa[..., :2], xb[..., :2])
    hi = np.minimum(xa[..., 2:], xb[..., 2:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    area_a = np.prod(xa[..., 2:] - xa[..., :2], axis=-1)
    area_b = np.prod(xb[..., 2:] - xb[..., :2], axis=-1)
    union = area_a + area_b - inter
    hull_lo = np.minimum(xa[..., :2], xb[..., :2])
    hull_hi = np.maximum(xa[..., 2:], xb[..., 2:])
    hull = np.prod(hull_hi - hull_lo, axis=-1)
    iou = inter / union
    return iou - (hull - union) / hull
