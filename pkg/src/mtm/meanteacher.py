"""Mean-teacher self-training pieces.

The teacher is an EMA copy of the student and only ever runs inference; its
pseudo-labels supervise the student on unlabeled foggy images.  The query
knowledge-transfer block injects the teacher's object-query embeddings into
the student's through multi-head attention, scaled by a coefficient that
decays linearly to zero over the stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import BoxSet
from .detector import Detector
from .errors import ContractError
from .nn import Module, MultiHeadAttention

OQKT_HEADS = 16
OQKT_HEAD_DIM = 16


@dataclass
class QuerySet:
    """Object-query content and positional embeddings for one model."""

    qe: np.ndarray  # (n_dec, c)
    pe: np.ndarray  # (n_dec, c)
    owner: str = "student"

    def __post_init__(self):
        self.qe = np.asarray(self.qe, dtype=np.float64)
        self.pe = np.asarray(self.pe, dtype=np.float64)
        if self.qe.shape != self.pe.shape:
            raise ContractError(
                f"query/positional embedding shapes differ: {self.qe.shape} vs {self.pe.shape}"
            )


@dataclass
class OqktSchedule:
    """Transfer coefficient, linear from 1 at epoch 0 down to 0."""

    total_epochs: int
    current_epoch: int = 0
    heads: int = OQKT_HEADS
    head_dim: int = OQKT_HEAD_DIM

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ContractError("schedule needs at least one epoch")


def alpha_step(schedule: OqktSchedule) -> float:
    if schedule.current_epoch > schedule.total_epochs:
        raise ContractError(
            f"epoch {schedule.current_epoch} beyond total {schedule.total_epochs}"
        )
    alpha = 1.0 - schedule.current_epoch / schedule.total_epochs
    return min(1.0, max(0.0, alpha))


class QueryKnowledgeTransfer(Module):
    """Attention from student queries into (frozen) teacher queries.

    The output projection starts at zero so the block begins as an exact
    identity on the student embeddings.
    """

    def __init__(self, c, rng, heads=OQKT_HEADS, head_dim=OQKT_HEAD_DIM):
        self.attn = MultiHeadAttention(
            c, heads, rng, head_dim=head_dim, out_dim=c, bias=False,
            zero_out_proj=True,
        )


def oqkt_enhance(student: QuerySet, teacher: QuerySet, alpha: float,
                 transfer: QueryKnowledgeTransfer,
                 student_qe: Tensor) -> Tensor:
    """Return enhanced student query embeddings:
    qe_s + alpha * MultiHead(qe_s + pe_s, qe_t + pe_t, qe_t)."""
    if student.qe.shape != teacher.qe.shape:
        raise ContractError(
            f"student/teacher query shapes differ: {student.qe.shape} vs {teacher.qe.shape}"
        )
    if student_qe.data.shape != student.qe.shape:
        raise ContractError("student_qe tensor does not match the query set")
    query = ag.add(student_qe, Tensor(student.pe))
    key = Tensor(teacher.qe + teacher.pe)
    value = Tensor(teacher.qe)
    mixed = transfer.attn(query, key, value)
    return ag.add(student_qe, ag.mul(mixed, alpha))


def ema_update(teacher_params: dict[str, Tensor], student_params: dict[str, Tensor],
               momentum: float):
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"EMA momentum must be in [0,1], got {momentum}")
    if teacher_params.keys() != student_params.keys():
        missing = set(teacher_params) ^ set(student_params)
        raise ContractError(f"parameter names differ between teacher/student: {missing}")
    for name, t in teacher_params.items():
        s = student_params[name]
        if t.data.shape != s.data.shape:
            raise ContractError(f"shape mismatch for {name}")
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


@dataclass
class PseudoLabelSet:
    labels: BoxSet
    image_id: int

    def __len__(self):
        return len(self.labels)


def generate_pseudo_labels(teacher: Detector, image: np.ndarray,
                           threshold: float, image_id: int = -1) -> PseudoLabelSet:
    """Teacher inference on a weak-augmented image; keep predictions whose
    best foreground probability beats both the background class and the
    confidence threshold."""
    if not 0.0 <= threshold < 1.0:
        raise ContractError(f"pseudo-label threshold must be in [0,1), got {threshold}")
    with ag.no_grad():
        _, _, logits, boxes = teacher.forward(image)
        probs = ag.softmax(logits, axis=-1).data
    fg = probs[:, : teacher.cfg.num_classes]
    classes = fg.argmax(axis=1)
    scores = fg[np.arange(len(fg)), classes]
    keep = (probs.argmax(axis=1) != teacher.cfg.num_classes) & (scores >= threshold)
    labels = BoxSet(boxes.data[keep].copy(), classes[keep], scores[keep])
    return PseudoLabelSet(labels, image_id)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class Augmented:
    image: np.ndarray
    flipped: bool


def augment(image: np.ndarray, strength: str, rng) -> Augmented:
    """Weak: horizontal flip with p=0.5.  Strong: flip plus brightness /
    contrast jitter (+-0.3), additive Gaussian noise (sigma 0.05), and
    channel-wide grayscale with p=0.2.  Output clamped to [0, 1]."""
    if strength not in ("weak", "strong"):
        raise ContractError(f"augment strength must be weak|strong, got {strength!r}")
    out = np.asarray(image, dtype=np.float64)
    flipped = bool(rng.random() < 0.5)
    if flipped:
        out = out[:, ::-1, :].copy()
    if strength == "strong":
        out = out + rng.uniform(-0.3, 0.3)
        out = (out - 0.5) * (1.0 + rng.uniform(-0.3, 0.3)) + 0.5
        out = out + rng.normal(0.0, 0.05, out.shape)
        if rng.random() < 0.2:
            gray = out.mean(axis=2, keepdims=True)
            out = np.repeat(gray, 3, axis=2)
        out = np.clip(out, 0.0, 1.0)
    elif not flipped:
        out = out.copy()
    return Augmented(out, flipped)


def flip_boxes_if(boxes: BoxSet, flipped: bool) -> BoxSet:
    return boxes.flip_horizontal() if flipped else boxes.copy()
