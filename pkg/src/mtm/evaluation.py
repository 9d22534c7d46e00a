"""Detection metrics and generalization-bound instrumentation.

AP uses score-ranked greedy matching at IoU 0.5 and the all-point
interpolated precision envelope; mAP averages classes that have ground
truth.  The divergence proxy trains a fresh domain discriminator on half the
features and converts its holdout error into the usual [0, 2] scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Adam, Tensor
from .alignment import Discriminator
from .boxes import BoxSet, cxcywh_to_xyxy, iou_matrix
from .errors import ContractError


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ContractError("degenerate box (nonpositive width/height)")
    return float(iou_matrix(a[None], b[None])[0, 0])


def giou(a, b) -> float:
    from .boxes import giou_matrix

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ContractError("degenerate box (nonpositive width/height)")
    return float(giou_matrix(a[None], b[None])[0, 0])


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    mean_ap: float
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)
    true_positives: int
    false_positives: int
    false_negatives: int


def average_precision(predictions: list[BoxSet], ground_truths: list[BoxSet],
                      iou_thresh: float = 0.5) -> EvalResult:
    """Per-class AP over a list of images (index = image id).

    Predictions are ranked by descending score with (image, box index) as the
    deterministic tie-break; each is greedily matched to the not-yet-matched
    ground-truth box of its class and image with the highest IoU >= thresh.
    """
    if len(predictions) != len(ground_truths):
        raise ContractError(
            f"prediction/ground-truth image counts differ: "
            f"{len(predictions)} vs {len(ground_truths)}"
        )
    classes = sorted({int(c) for gt in ground_truths for c in gt.classes})
    if not classes:
        raise ContractError("no ground-truth boxes in any class; mAP undefined")

    per_class_ap: dict[int, float] = {}
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    tp_total = fp_total = fn_total = 0

    for cls in classes:
        records = []  # (-score, image_id, box_idx)
        for img_id, pred in enumerate(predictions):
            if pred.scores is None:
                raise ContractError("predictions need scores for AP")
            for box_idx in range(len(pred)):
                if pred.classes[box_idx] == cls:
                    records.append((-pred.scores[box_idx], img_id, box_idx))
        records.sort()

        n_gt = sum(int((gt.classes == cls).sum()) for gt in ground_truths)
        matched = [set() for _ in ground_truths]
        tp = np.zeros(len(records))
        for rank, (_, img_id, box_idx) in enumerate(records):
            gt = ground_truths[img_id]
            gt_rows = np.flatnonzero(gt.classes == cls)
            if len(gt_rows) == 0:
                continue
            box = predictions[img_id].boxes[box_idx]
            overlap = iou_matrix(box[None], gt.boxes[gt_rows])[0]
            best, best_iou = -1, -1.0
            for j, row in enumerate(gt_rows):
                if row in matched[img_id]:
                    continue
                if overlap[j] > best_iou:
                    best, best_iou = row, overlap[j]
            if best >= 0 and best_iou >= iou_thresh:
                matched[img_id].add(best)
                tp[rank] = 1.0

        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

        mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):  # precision envelope
            mpre[i] = max(mpre[i], mpre[i + 1])
        steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
        ap = float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))

        per_class_ap[cls] = ap
        pr_curves[cls] = (recall, precision)
        n_tp = int(cum_tp[-1]) if len(records) else 0
        tp_total += n_tp
        fp_total += len(records) - n_tp
        fn_total += n_gt - n_tp

    mean_ap = float(np.mean([per_class_ap[c] for c in classes]))
    return EvalResult(per_class_ap, mean_ap, pr_curves, tp_total, fp_total, fn_total)


# ---------------------------------------------------------------------------
# divergence proxy and bound terms
# ---------------------------------------------------------------------------


def hdiv_proxy(features_a: np.ndarray, features_b: np.ndarray, rng,
               train_steps: int = 300, lr: float = 1e-3) -> float:
    """Proxy distance between two feature samples in [0, 2].

    Shuffle each side, train a fresh discriminator on the first halves to
    separate them, and score 2 * (1 - 2 * holdout_error), clamped at 0.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature shapes incompatible: {a.shape} vs {b.shape}")
    if len(a) < 20 or len(b) < 20:
        raise ContractError("need at least 20 samples per side")
    a = a[rng.permutation(len(a))]
    b = b[rng.permutation(len(b))]
    ha, hb = len(a) // 2, len(b) // 2

    disc = Discriminator(a.shape[1], rng)
    opt = Adam(disc.parameters(), lr=lr)
    fit_a, fit_b = Tensor(a[:ha]), Tensor(b[:hb])
    for _ in range(train_steps):
        loss = ag.add(
            ag.bce_with_logits(disc(fit_a), 0.0),
            ag.bce_with_logits(disc(fit_b), 1.0),
        )
        ag.backward(loss)
        opt.step()

    with ag.no_grad():
        pred_a = disc(Tensor(a[ha:])).data.reshape(-1) > 0.0
        pred_b = disc(Tensor(b[hb:])).data.reshape(-1) > 0.0
    errors = int(pred_a.sum()) + int((~pred_b).sum())
    err = errors / (len(pred_a) + len(pred_b))
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


@dataclass
class BoundReport:
    """Empirical pieces of the two-source target-error bound."""

    eps_alpha_hat: float
    div_proxy: float
    gamma_proxy: float
    complexity: float
    alpha: tuple[float, float]
    beta: tuple[float, float]
    m: int
    d_vc: int
    delta: float

    def target_error_bound(self) -> float:
        return self.eps_alpha_hat + 0.5 * self.div_proxy + self.gamma_proxy + self.complexity


def complexity_term(alpha, beta, m: int, d_vc: int, delta: float) -> float:
    ratio = sum(a * a / b for a, b in zip(alpha, beta))
    return math.sqrt(ratio * (d_vc * math.log(2 * m) - math.log(delta)) / (2 * m))


def bound_terms(source_errs, target_like_errs, alpha, beta, m: int, d_vc: int,
                delta: float, div_proxy: float = 0.0,
                gamma_proxy: float = 0.0) -> BoundReport:
    """Assemble the bound report from measured per-sample errors and the
    companion divergence / joint-hypothesis proxies."""
    alpha = tuple(float(x) for x in alpha)
    beta = tuple(float(x) for x in beta)
    for name, vec in (("alpha", alpha), ("beta", beta)):
        if len(vec) != 2 or min(vec) < 0 or abs(sum(vec) - 1.0) > 1e-9:
            raise ContractError(f"{name} must be a 2-point simplex weight, got {vec}")
    if min(beta) == 0.0:
        raise ContractError("beta entries must be positive")
    if m < 1:
        raise ContractError("sample count m must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ContractError(f"delta must be in (0,1), got {delta}")
    eps = alpha[0] * float(np.mean(source_errs)) + alpha[1] * float(np.mean(target_like_errs))
    return BoundReport(
        eps_alpha_hat=eps,
        div_proxy=div_proxy,
        gamma_proxy=gamma_proxy,
        complexity=complexity_term(alpha, beta, m, d_vc, delta),
        alpha=alpha,
        beta=beta,
        m=m,
        d_vc=d_vc,
        delta=delta,
    )
