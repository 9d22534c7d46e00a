"""Set-prediction shape detector.

Patch-embedding backbone, a pre-norm attention encoder whose input carries a
learned domain token in row 0, a decoder refining learned object queries
(domain token again in row 0), class/box heads, bipartite matching, and the
matched-pair detection loss.  All per-layer sequence features are retained so
the alignment losses can consume them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import BoxSet, giou_matrix, iou_matrix
from .errors import ContractError, ShapeError
from .matching import hungarian_match
from .nn import Linear, LayerNorm, Mlp, Module, MultiHeadAttention, parameter

# matching-cost and loss weights, shared by both (detection-transformer lineage)
CLASS_WEIGHT = 1.0
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
NO_OBJECT_WEIGHT = 0.1


@dataclass
class ModelConfig:
    c: int = 64  # embedding width
    n_dec: int = 20  # object queries
    l_enc: int = 3
    l_dec: int = 3
    heads: int = 4
    num_classes: int = 3
    patch_size: int = 8
    image_size: int = 64

    def __post_init__(self):
        for name in ("c", "n_dec", "l_enc", "l_dec", "heads", "num_classes",
                     "patch_size", "image_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be >= 1")
        if self.c % self.heads:
            raise ContractError(f"width {self.c} not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )

    @property
    def n_enc(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class EncoderState:
    layers: list[Tensor]  # one (1 + n_enc, c) tensor per encoder layer
    domain_token_input: Tensor

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


@dataclass
class DecoderState:
    layers: list[Tensor]  # one (1 + n_dec, c) tensor per decoder layer

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


class EncoderLayer(Module):
    def __init__(self, c, heads, rng):
        self.norm_attn = LayerNorm(c)
        self.attn = MultiHeadAttention(c, heads, rng)
        self.norm_ffn = LayerNorm(c)
        self.ffn_in = Linear(c, 2 * c, rng)
        self.ffn_out = Linear(2 * c, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = ag.add(x, self.attn(h, h, h))
        h = ag.relu(self.ffn_in(self.norm_ffn(x)))
        return ag.add(x, self.ffn_out(h))


class DecoderLayer(Module):
    def __init__(self, c, heads, rng):
        self.norm_self = LayerNorm(c)
        self.self_attn = MultiHeadAttention(c, heads, rng)
        self.norm_cross = LayerNorm(c)
        self.cross_attn = MultiHeadAttention(c, heads, rng)
        self.norm_ffn = LayerNorm(c)
        self.ffn_in = Linear(c, 2 * c, rng)
        self.ffn_out = Linear(2 * c, c, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.norm_self(x)
        x = ag.add(x, self.self_attn(h, h, h))
        h = self.norm_cross(x)
        x = ag.add(x, self.cross_attn(h, memory, memory))
        h = ag.relu(self.ffn_in(self.norm_ffn(x)))
        return ag.add(x, self.ffn_out(h))


class Detector(Module):
    """Patch tokens -> encoder -> query decoder -> class/box heads."""

    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.c
        self.cfg = cfg
        self.patch_proj = Linear(3 * cfg.patch_size**2, c, rng)
        self.domain_token_enc = parameter(rng.normal(0.0, 0.02, (1, c)))
        self.pos_enc = parameter(rng.normal(0.0, 0.02, (1 + cfg.n_enc, c)))
        self.level_embed = parameter(rng.normal(0.0, 0.02, (1, c)))
        self.enc_layers = [EncoderLayer(c, cfg.heads, rng) for _ in range(cfg.l_enc)]
        self.domain_token_dec = parameter(rng.normal(0.0, 0.02, (1, c)))
        self.query_embed = parameter(rng.normal(0.0, 0.02, (cfg.n_dec, c)))
        self.pos_dec = parameter(rng.normal(0.0, 0.02, (1 + cfg.n_dec, c)))
        self.dec_layers = [DecoderLayer(c, cfg.heads, rng) for _ in range(cfg.l_dec)]
        self.class_head = Linear(c, cfg.num_classes + 1, rng)
        self.box_head = Mlp([c, c, c, 4], rng)

    # backbone -------------------------------------------------------------

    def patch_embed(self, image: np.ndarray) -> Tensor:
        """Flatten non-overlapping patches and project them to width c."""
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[0], image.shape[1]
        ps = self.cfg.patch_size
        if h % ps or w % ps:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {ps}")
        gh, gw = h // ps, w // ps
        patches = (
            image.reshape(gh, ps, gw, ps, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, ps * ps * 3)
        )
        return self.patch_proj(Tensor(patches))

    # encoder / decoder ----------------------------------------------------

    def encoder_forward(self, tokens: Tensor) -> EncoderState:
        if tokens.data.shape[0] != self.cfg.n_enc:
            raise ShapeError(
                f"expected {self.cfg.n_enc} tokens, got {tokens.data.shape[0]}"
            )
        x = ag.concat([self.domain_token_enc, tokens], axis=0)
        x = ag.add(ag.add(x, self.pos_enc), self.level_embed)
        layers = []
        for layer in self.enc_layers:
            x = layer(x)
            layers.append(x)
        return EncoderState(layers=layers, domain_token_input=self.domain_token_enc)

    def decoder_forward(self, memory_final: Tensor,
                        query_embed: Tensor | None = None) -> DecoderState:
        qe = query_embed if query_embed is not None else self.query_embed
        if qe.data.shape != (self.cfg.n_dec, self.cfg.c):
            raise ShapeError(
                f"query embeddings {qe.data.shape} != ({self.cfg.n_dec}, {self.cfg.c})"
            )
        x = ag.add(ag.concat([self.domain_token_dec, qe], axis=0), self.pos_dec)
        memory = memory_final[1:]  # domain token row never feeds cross-attention
        layers = []
        for layer in self.dec_layers:
            x = layer(x, memory)
            layers.append(x)
        return DecoderState(layers=layers)

    # heads ----------------------------------------------------------------

    def predict_heads(self, dec: DecoderState) -> tuple[Tensor, Tensor]:
        """Class logits (n_dec, num_classes + 1) and sigmoid boxes (n_dec, 4)
        from the final refined object queries (domain token row excluded)."""
        queries = dec.final[1:]
        logits = self.class_head(queries)
        boxes = ag.sigmoid(self.box_head(queries))
        return logits, boxes

    def forward(self, image: np.ndarray, query_embed: Tensor | None = None):
        enc = self.encoder_forward(self.patch_embed(image))
        dec = self.decoder_forward(enc.final, query_embed)
        logits, boxes = self.predict_heads(dec)
        return enc, dec, logits, boxes

    def predict(self, image: np.ndarray) -> BoxSet:
        """All object-query predictions: class = best non-background class,
        score = its softmax probability."""
        with ag.no_grad():
            _, _, logits, boxes = self.forward(image)
        probs = np.asarray(ag.softmax(logits, axis=-1).data)
        fg = probs[:, : self.cfg.num_classes]
        classes = fg.argmax(axis=1)
        scores = fg[np.arange(len(fg)), classes]
        return BoxSet(boxes.data.copy(), classes, scores)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _giou_aligned(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU between matched (n, 4) cxcywh boxes."""
    half = ag.mul(pred[:, 2:4], 0.5)
    p_lo = ag.add(pred[:, 0:2], ag.mul(half, -1.0))
    p_hi = ag.add(pred[:, 0:2], half)
    g = np.asarray(gt, dtype=np.float64)
    g_lo = Tensor(g[:, :2] - g[:, 2:] / 2.0)
    g_hi = Tensor(g[:, :2] + g[:, 2:] / 2.0)
    lo = ag.maximum(p_lo, g_lo)
    hi = ag.minimum(p_hi, g_hi)
    side = ag.maximum(ag.add(hi, ag.mul(lo, -1.0)), Tensor(np.zeros_like(g[:, :2])))
    inter = ag.mul(side[:, 0:1], side[:, 1:2])
    p_wh = ag.add(p_hi, ag.mul(p_lo, -1.0))
    p_area = ag.mul(p_wh[:, 0:1], p_wh[:, 1:2])
    g_area = Tensor((g[:, 2] * g[:, 3]).reshape(-1, 1))
    union = ag.add(ag.add(p_area, g_area), ag.mul(inter, -1.0))
    hull_lo = ag.minimum(p_lo, g_lo)
    hull_hi = ag.maximum(p_hi, g_hi)
    hull_wh = ag.add(hull_hi, ag.mul(hull_lo, -1.0))
    hull = ag.mul(hull_wh[:, 0:1], hull_wh[:, 1:2])
    iou = ag.div(inter, union)
    penalty = ag.div(ag.add(hull, ag.mul(union, -1.0)), hull)
    return ag.add(iou, ag.mul(penalty, -1.0))


def match_predictions(logits: Tensor, boxes: Tensor, gt: BoxSet) -> list[tuple[int, int]]:
    """Bipartite match of queries to ground-truth boxes on the standard
    class + L1 + GIoU cost (graph-free)."""
    if len(gt) == 0:
        return []
    with ag.no_grad():
        probs = ag.softmax(logits, axis=-1).data
    pb = boxes.data
    cost_class = -probs[:, gt.classes]
    cost_l1 = np.abs(pb[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    cost_giou = 1.0 - giou_matrix(pb, gt.boxes)
    cost = CLASS_WEIGHT * cost_class + L1_WEIGHT * cost_l1 + GIOU_WEIGHT * cost_giou
    return hungarian_match(cost)


def detection_loss(logits: Tensor, boxes: Tensor, gt: BoxSet) -> Tensor:
    """Hungarian-matched set loss: weighted cross-entropy over all queries
    (unmatched queries supervise the no-object class at reduced weight) plus
    L1 and GIoU terms on matched pairs."""
    n_dec, n_cls_total = logits.data.shape
    if n_dec == 0:
        raise ContractError("detection loss needs at least one query")
    background = n_cls_total - 1
    pairs = match_predictions(logits, boxes, gt)

    targets = np.full(n_dec, background, dtype=np.intp)
    weights = np.full(n_dec, NO_OBJECT_WEIGHT)
    for q, t in pairs:
        targets[q] = gt.classes[t]
        weights[q] = 1.0

    logp = ag.log_softmax(logits, axis=-1)
    onehot = np.zeros((n_dec, n_cls_total))
    onehot[np.arange(n_dec), targets] = 1.0
    ce = ag.mul(ag.tsum(ag.mul(logp, Tensor(onehot)), axis=1), -1.0)
    class_loss = ag.mul(ag.tsum(ag.mul(ce, Tensor(weights))), 1.0 / weights.sum())

    if not pairs:
        return ag.mul(class_loss, CLASS_WEIGHT)

    rows = [q for q, _ in pairs]
    order = [t for _, t in pairs]
    matched = ag.gather_rows(boxes, rows)
    gt_boxes = gt.boxes[order]
    n = float(len(pairs))
    l1 = ag.mul(ag.tsum(ag.absolute(ag.add(matched, Tensor(-gt_boxes)))), 1.0 / n)
    giou = _giou_aligned(matched, gt_boxes)
    giou_loss = ag.mul(ag.tsum(ag.add(ag.mul(giou, -1.0), 1.0)), 1.0 / n)
    return ag.add(
        ag.add(ag.mul(class_loss, CLASS_WEIGHT), ag.mul(l1, L1_WEIGHT)),
        ag.mul(giou_loss, GIOU_WEIGHT),
    )
