"""Two-stage training driver.

Pretraining minimizes detection loss on labeled source and target-like pairs
plus the reversed adversarial alignment losses; self-training continues from
that checkpoint with a frozen EMA teacher producing pseudo-labels for
unlabeled target images while the student also keeps source supervision and
alignment.  One Adam instance drives everything; the adversarial min-max is
carried entirely by gradient reversal.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .alignment import (LossWeights, MaskSpec, build_discriminators, mdqfa_loss,
                        mtwfa_loss)
from .autograd import Adam, Tensor
from .boxes import BoxSet
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import RunConfig, write_config
from .data import DatasetManifest, batch_iter, build_splits, export_dataset
from .detector import Detector, detection_loss
from .errors import ContractError, TrainingError
from .evaluation import average_precision
from .meanteacher import (OqktSchedule, QueryKnowledgeTransfer, QuerySet,
                          alpha_step, augment, ema_update, flip_boxes_if,
                          generate_pseudo_labels, oqkt_enhance)

ROLES = ("mdqfa_enc", "mtwfa_enc", "mdqfa_dec", "mtwfa_dec")

METRIC_COLUMNS = (
    ["stage", "epoch", "det_loss"]
    + [f"adv_{r}" for r in ROLES]
    + [f"disc_acc_{r}" for r in ROLES]
    + ["disc_acc_mean", "val_map", "teacher_val_map", "alpha"]
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return repr(float(value))


class MetricsLog:
    """Append-only per-epoch rows; wall-clock goes to a separate timing file
    so metrics.csv stays a pure function of (config, seed)."""

    def __init__(self):
        self.rows: list[dict] = []
        self.timings: list[tuple[str, int, float]] = []

    def add(self, stage: str, epoch: int, wall_seconds: float, **values):
        row = {"stage": stage, "epoch": epoch}
        row.update(values)
        self.rows.append(row)
        self.timings.append((stage, epoch, wall_seconds))

    def write(self, metrics_path, timing_path):
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row["stage"], row["epoch"]]
                    + [_fmt(row.get(col)) for col in METRIC_COLUMNS[2:]]
                )
        with open(timing_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "epoch", "wall_seconds"])
            for stage, epoch, wall in self.timings:
                writer.writerow([stage, epoch, f"{wall:.3f}"])


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 100, stream])


def evaluate_map(model: Detector, scenes) -> float:
    predictions = [model.predict(scene.image) for scene in scenes]
    truths = [scene.boxes for scene in scenes]
    return average_precision(predictions, truths).mean_ap


@dataclass
class _AdvState:
    """Per-stage alignment plumbing: discriminators, rng-backed mask specs,
    and running correct/total counts per discriminator role."""

    discs: dict
    spec_dq: MaskSpec | None
    spec_tw: MaskSpec | None
    weights: LossWeights
    counts: dict = field(default_factory=lambda: {r: [0, 0] for r in ROLES})
    sums: dict = field(default_factory=lambda: {r: 0.0 for r in ROLES})
    steps: int = 0

    def reset_epoch(self):
        self.counts = {r: [0, 0] for r in ROLES}
        self.sums = {r: 0.0 for r in ROLES}
        self.steps = 0


def _make_adv_state(cfg: RunConfig, discs, mask_rng) -> _AdvState:
    spec_dq = spec_tw = None
    if cfg.mdqfa != "off":
        theta = cfg.theta_mask if cfg.mdqfa == "masked" else 0.0
        spec_dq = MaskSpec(theta, cfg.eta, rng=mask_rng)
    if cfg.mtwfa != "off":
        theta = cfg.theta_mask if cfg.mtwfa == "masked" else 0.0
        spec_tw = MaskSpec(theta, cfg.eta, rng=mask_rng)
    return _AdvState(discs, spec_dq, spec_tw, cfg.loss_weights())


def _adv_loss(state: _AdvState, enc, dec, d: float):
    """Weighted alignment loss for one image; updates accuracy tallies."""
    total = None
    grl = state.weights.lambda_grl
    parts = []
    if state.spec_dq is not None:
        parts.append(("mdqfa_enc", mdqfa_loss(enc.layers, d, state.spec_dq,
                                              state.discs["mdqfa_enc"], grl),
                      state.weights.lambda_mdqfa))
        parts.append(("mdqfa_dec", mdqfa_loss(dec.layers, d, state.spec_dq,
                                              state.discs["mdqfa_dec"], grl),
                      state.weights.lambda_mdqfa))
    if state.spec_tw is not None:
        parts.append(("mtwfa_enc", mtwfa_loss(enc.layers, d, state.spec_tw,
                                              state.discs["mtwfa_enc"], grl),
                      state.weights.lambda_mtwfa))
        parts.append(("mtwfa_dec", mtwfa_loss(dec.layers, d, state.spec_tw,
                                              state.discs["mtwfa_dec"], grl),
                      state.weights.lambda_mtwfa))
    for role, outcome, weight in parts:
        state.sums[role] += float(outcome.loss.data)
        hits = ((outcome.logits > 0.0) == bool(outcome.label)).sum()
        state.counts[role][0] += int(hits)
        state.counts[role][1] += outcome.logits.size
        term = ag.mul(outcome.loss, weight)
        total = term if total is None else ag.add(total, term)
    return total


def _epoch_adv_metrics(state: _AdvState | None, pair_count: int) -> dict:
    out = {}
    accs = []
    for role in ROLES:
        if state is None or state.counts[role][1] == 0:
            out[f"adv_{role}"] = None
            out[f"disc_acc_{role}"] = None
            continue
        out[f"adv_{role}"] = state.sums[role] / max(pair_count, 1)
        acc = state.counts[role][0] / state.counts[role][1]
        out[f"disc_acc_{role}"] = acc
        accs.append(acc)
    out["disc_acc_mean"] = float(np.mean(accs)) if accs else None
    return out


def _check_finite(loss: Tensor, metrics: MetricsLog, stage: str, epoch: int):
    value = float(loss.data)
    if not np.isfinite(value):
        metrics.add(stage, epoch, 0.0, det_loss=value)
        raise TrainingError(f"non-finite loss {value} in {stage} epoch {epoch}")


def _pack_state(model, discs, opt, opt_names, oqkt=None) -> dict:
    tensors = {f"model.{k}": v.data.copy() for k, v in model.named_parameters().items()}
    for role, disc in discs.items():
        for k, v in disc.named_parameters().items():
            tensors[f"disc.{role}.{k}"] = v.data.copy()
    if oqkt is not None:
        for k, v in oqkt.named_parameters().items():
            tensors[f"oqkt.{k}"] = v.data.copy()
    for name, m, v in zip(opt_names, opt.m, opt.v):
        tensors[f"opt.m.{name}"] = m.copy()
        tensors[f"opt.v.{name}"] = v.copy()
    tensors["opt.step_count"] = np.array(float(opt.step_count))
    return tensors


def _apply_named(module, section: dict, what: str):
    params = module.named_parameters()
    if section.keys() != params.keys():
        missing = sorted(set(params) ^ set(section))
        raise ContractError(f"{what} parameters do not match checkpoint: {missing[:4]}")
    for name, param in params.items():
        if param.data.shape != section[name].shape:
            raise ContractError(f"{what}.{name} shape mismatch")
        param.data[...] = section[name]


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_stage(cfg: RunConfig, manifest: DatasetManifest, out_dir,
                   metrics: MetricsLog, log=print) -> str:
    """Train from scratch on source (+ target-like) pairs; returns the
    checkpoint path."""
    model = Detector(cfg.model, _rng(cfg, 0))
    discs = build_discriminators(cfg.model.c, _rng(cfg, 1))
    align = cfg.alignment_enabled() and cfg.use_target_like
    adv = _make_adv_state(cfg, discs, _rng(cfg, 2)) if align else None

    named = {f"model.{k}": v for k, v in model.named_parameters().items()}
    for role in ROLES:
        if adv is not None and _role_active(cfg, role):
            for k, v in discs[role].named_parameters().items():
                named[f"disc.{role}.{k}"] = v
    opt = Adam(list(named.values()), lr=cfg.lr_pretrain)
    shuffle_rng = _rng(cfg, 3)

    decay_epoch = (cfg.epochs_pretrain + 1) // 2
    for epoch in range(cfg.epochs_pretrain):
        start = time.perf_counter()
        opt.lr = cfg.lr_pretrain * (0.1 if epoch >= decay_epoch else 1.0)
        if adv is not None:
            adv.reset_epoch()
        det_sum = 0.0
        pairs = 0
        for src, counterpart in batch_iter(manifest, "pretrain", shuffle_rng):
            enc_s, dec_s, logits_s, boxes_s = model.forward(src.image)
            loss = detection_loss(logits_s, boxes_s, src.boxes)
            if cfg.use_target_like:
                enc_t, dec_t, logits_t, boxes_t = model.forward(counterpart.image)
                loss = ag.add(loss, detection_loss(logits_t, boxes_t, counterpart.boxes))
                if adv is not None:
                    loss = ag.add(loss, _adv_loss(adv, enc_s, dec_s, 0.0))
                    loss = ag.add(loss, _adv_loss(adv, enc_t, dec_t, 1.0))
            _check_finite(loss, metrics, "pretrain", epoch)
            det_sum += float(loss.data)
            pairs += 1
            ag.backward(loss)
            opt.step()
        val_map = evaluate_map(model, manifest.target_val)
        row = _epoch_adv_metrics(adv, pairs)
        metrics.add("pretrain", epoch, time.perf_counter() - start,
                    det_loss=det_sum / max(pairs, 1), val_map=val_map, **row)
        log(f"[pretrain] epoch {epoch}: loss {det_sum / max(pairs, 1):.4f} "
            f"val mAP {val_map:.4f}")

    path = os.path.join(out_dir, "pretrain.ckpt")
    save_checkpoint(path, cfg.model, _pack_state(model, discs, opt, list(named)))
    return path


def _role_active(cfg: RunConfig, role: str) -> bool:
    return (cfg.mdqfa != "off") if role.startswith("mdqfa") else (cfg.mtwfa != "off")


# ---------------------------------------------------------------------------
# self-training
# ---------------------------------------------------------------------------


def selftrain_stage(cfg: RunConfig, manifest: DatasetManifest, pretrained_path,
                    out_dir, metrics: MetricsLog, log=print) -> str:
    """Mean-teacher self-training from a pretraining checkpoint; keeps the
    best student (by target-val mAP) and returns its checkpoint path."""
    state = load_checkpoint(pretrained_path)
    if state.config != cfg.model:
        raise ContractError("checkpoint model config differs from run config")

    student = Detector(cfg.model, _rng(cfg, 10))
    _apply_named(student, state.section("model."), "student")
    teacher = Detector(cfg.model, _rng(cfg, 11))
    _apply_named(teacher, state.section("model."), "teacher")
    for p in teacher.named_parameters().values():
        p.requires_grad = False

    discs = build_discriminators(cfg.model.c, _rng(cfg, 12))
    for role in ROLES:
        section = state.section(f"disc.{role}.")
        if section:
            _apply_named(discs[role], section, f"disc.{role}")

    transfer = QueryKnowledgeTransfer(cfg.model.c, _rng(cfg, 13)) if cfg.use_oqkt else None
    schedule = OqktSchedule(total_epochs=cfg.epochs_selftrain)

    adv = _make_adv_state(cfg, discs, _rng(cfg, 14)) if cfg.alignment_enabled() else None
    named = dict(student.named_parameters())
    for role in ROLES:
        if adv is not None and _role_active(cfg, role):
            for k, v in discs[role].named_parameters().items():
                named[f"disc.{role}.{k}"] = v
    if transfer is not None:
        for k, v in transfer.named_parameters().items():
            named[f"oqkt.{k}"] = v
    opt = Adam(list(named.values()), lr=cfg.lr_selftrain)

    shuffle_rng = _rng(cfg, 15)
    aug_rng = _rng(cfg, 16)
    teacher_named = teacher.named_parameters()
    student_named = student.named_parameters()

    pseudo_rows = []
    best_map = -1.0
    best_state = None
    for epoch in range(cfg.epochs_selftrain):
        start = time.perf_counter()
        schedule.current_epoch = epoch
        alpha = alpha_step(schedule)
        if adv is not None:
            adv.reset_epoch()
        det_sum = 0.0
        pairs = 0
        for src, tgt in batch_iter(manifest, "selftrain", shuffle_rng):
            weak = augment(tgt.image, "weak", aug_rng)
            strong = augment(tgt.image, "strong", aug_rng)
            pseudo = generate_pseudo_labels(teacher, weak.image,
                                            cfg.pseudo_threshold, tgt.scene_id)
            labels = flip_boxes_if(pseudo.labels, weak.flipped != strong.flipped)
            if cfg.dump_pseudo_labels:
                for b, c, s in zip(labels.boxes, labels.classes, labels.scores):
                    pseudo_rows.append([tgt.scene_id, int(c), repr(float(s))]
                                       + [repr(float(x)) for x in b])

            query_embed = None
            if transfer is not None:
                student_qs = QuerySet(student.query_embed.data,
                                      student.pos_dec.data[1:], "student")
                teacher_qs = QuerySet(teacher.query_embed.data,
                                      teacher.pos_dec.data[1:], "teacher")
                query_embed = oqkt_enhance(student_qs, teacher_qs, alpha,
                                           transfer, student.query_embed)

            enc_t, dec_t, logits_t, boxes_t = student.forward(strong.image, query_embed)
            loss = detection_loss(logits_t, boxes_t, labels)
            enc_s, dec_s, logits_s, boxes_s = student.forward(src.image)
            loss = ag.add(loss, detection_loss(logits_s, boxes_s, src.boxes))
            if adv is not None:
                loss = ag.add(loss, _adv_loss(adv, enc_s, dec_s, 0.0))
                loss = ag.add(loss, _adv_loss(adv, enc_t, dec_t, 1.0))
            _check_finite(loss, metrics, "selftrain", epoch)
            det_sum += float(loss.data)
            pairs += 1
            ag.backward(loss)
            opt.step()
            ema_update(teacher_named, student_named, cfg.ema_momentum)

        student_map = evaluate_map(student, manifest.target_val)
        teacher_map = evaluate_map(teacher, manifest.target_val)
        row = _epoch_adv_metrics(adv, pairs)
        metrics.add("selftrain", epoch, time.perf_counter() - start,
                    det_loss=det_sum / max(pairs, 1), val_map=student_map,
                    teacher_val_map=teacher_map, alpha=alpha, **row)
        log(f"[selftrain] epoch {epoch}: alpha {alpha:.3f} student mAP "
            f"{student_map:.4f} teacher mAP {teacher_map:.4f}")
        if student_map > best_map:
            best_map = student_map
            best_state = _pack_state(student, discs, opt, list(named), transfer)

    if cfg.dump_pseudo_labels:
        with open(os.path.join(out_dir, "pseudo_labels.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "class", "score", "cx", "cy", "w", "h"])
            writer.writerows(pseudo_rows)

    path = os.path.join(out_dir, "selftrain.ckpt")
    save_checkpoint(path, cfg.model, best_state)
    return path


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

SWEEP_THETAS = (0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80)
SWEEP_ETAS = (1.0 / 3.0, 0.5, 1.0)


def final_eval(cfg: RunConfig, manifest: DatasetManifest, ckpt_path, out_dir,
               split: str = "target-val") -> float:
    scenes = {"target-val": manifest.target_val, "source": manifest.source,
              "target-like": manifest.target_like}.get(split)
    if scenes is None:
        raise ContractError(f"unknown eval split {split!r}")
    state = load_checkpoint(ckpt_path)
    model = Detector(state.config, np.random.default_rng(0))
    _apply_named(model, state.section("model."), "model")
    predictions = [model.predict(scene.image) for scene in scenes]
    truths = [scene.boxes for scene in scenes]
    result = average_precision(predictions, truths)
    with open(os.path.join(out_dir, "eval.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint", "split", "class", "ap"])
        for cls, ap in sorted(result.per_class_ap.items()):
            writer.writerow([os.path.basename(ckpt_path), split, cls, repr(ap)])
        writer.writerow([os.path.basename(ckpt_path), split, "mean", repr(result.mean_ap)])
    return result.mean_ap


def run_stages(cfg: RunConfig, stage: str, log=print) -> dict:
    """Execute the requested stage(s); returns paths of produced artifacts."""
    if stage not in ("pretrain", "selftrain", "all", "sweep"):
        raise ContractError(f"unknown stage {stage!r}")
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.ini"))
    manifest = build_splits(cfg.n_source, cfg.n_target, cfg.seed,
                            cfg.model.image_size, cfg.n_target_val)
    metrics = MetricsLog()
    produced: dict[str, str] = {"out_dir": out_dir}

    if stage == "sweep":
        sweep_path = os.path.join(out_dir, "sweep.csv")
        with open(sweep_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["theta_mask", "eta", "val_map"])
            for theta in SWEEP_THETAS:
                for eta in SWEEP_ETAS:
                    cell = replace(cfg, theta_mask=theta, eta=eta,
                                   out_dir=os.path.join(out_dir, f"cell_{theta:.2f}_{eta:.4f}"))
                    os.makedirs(cell.out_dir, exist_ok=True)
                    cell_metrics = MetricsLog()
                    ckpt = pretrain_stage(cell, manifest, cell.out_dir, cell_metrics, log)
                    val = cell_metrics.rows[-1]["val_map"]
                    writer.writerow([repr(theta), repr(eta), repr(float(val))])
                    log(f"[sweep] theta {theta:.2f} eta {eta:.4f}: mAP {val:.4f}")
        produced["sweep"] = sweep_path
        metrics.write(os.path.join(out_dir, "metrics.csv"),
                      os.path.join(out_dir, "timing.csv"))
        return produced

    last_ckpt = None
    if stage in ("pretrain", "all"):
        last_ckpt = pretrain_stage(cfg, manifest, out_dir, metrics, log)
        produced["pretrain"] = last_ckpt
    if stage in ("selftrain", "all"):
        pre = produced.get("pretrain", os.path.join(out_dir, "pretrain.ckpt"))
        if not os.path.exists(pre):
            raise ContractError(f"self-training needs a pretraining checkpoint at {pre}")
        if cfg.use_mean_teacher:
            last_ckpt = selftrain_stage(cfg, manifest, pre, out_dir, metrics, log)
            produced["selftrain"] = last_ckpt
        else:
            log("[selftrain] mean teacher disabled; keeping the pretrained model")
            last_ckpt = pre

    metrics.write(os.path.join(out_dir, "metrics.csv"),
                  os.path.join(out_dir, "timing.csv"))
    produced["metrics"] = os.path.join(out_dir, "metrics.csv")
    if last_ckpt is not None:
        final_eval(cfg, manifest, last_ckpt, out_dir)
        produced["eval"] = os.path.join(out_dir, "eval.csv")
    return produced
