"""Synthetic two-domain shape scenes.

Source scenes are clear renders of 1-6 colored shapes (circle / square /
triangle) on a muted textured background.  The target domain applies a
parametric fog (blur, contrast loss, haze blend) to independently generated
scenes; the target-like domain applies fog drawn from the same parameter
distribution to *source* content, so it inherits the source annotations.

Everything regenerates bit-identically from (seed, config); the on-disk
writer (PPM images + CSV annotations + manifest index) is an optional cache
for inspection, not the training path.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxSet
from .errors import ContractError

CLASS_NAMES = ("circle", "square", "triangle")

# stream tags for per-scene RNGs, so splits are independent and parallel-safe
_STREAM_SOURCE = 0
_STREAM_TARGET_LIKE_FOG = 1
_STREAM_TARGET_TRAIN = 2
_STREAM_TARGET_TRAIN_FOG = 3
_STREAM_TARGET_VAL = 4
_STREAM_TARGET_VAL_FOG = 5

_TARGET_TRAIN_ID_BASE = 10_000
_TARGET_VAL_ID_BASE = 20_000


@dataclass
class Scene:
    image: np.ndarray  # (h, w, 3) float64 in [0, 1]
    boxes: BoxSet
    domain: str  # source | target | target_like
    id: int


@dataclass
class FogParams:
    haze_intensity: float
    haze_color: np.ndarray
    blur_radius: int
    contrast_scale: float

    def __post_init__(self):
        if not 0.0 <= self.haze_intensity <= 1.0:
            raise ContractError("haze_intensity must be in [0,1]")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise ContractError("contrast_scale must be in (0,1]")
        if self.blur_radius < 0:
            raise ContractError("blur_radius must be >= 0")
        self.haze_color = np.asarray(self.haze_color, dtype=np.float64)

    @staticmethod
    def identity() -> "FogParams":
        return FogParams(0.0, np.zeros(3), 0, 1.0)


def draw_fog_params(rng) -> FogParams:
    """Fog parameter distribution shared by target and target-like scenes."""
    return FogParams(
        haze_intensity=rng.uniform(0.55, 0.80),
        haze_color=np.array([0.72, 0.76, 0.82]) + rng.uniform(-0.04, 0.04, 3),
        blur_radius=int(rng.integers(1, 3)),
        contrast_scale=rng.uniform(0.60, 0.90),
    )


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

_SHAPE_BASE_COLORS = np.array(
    [[0.85, 0.25, 0.20],  # circle: red-ish
     [0.20, 0.75, 0.30],  # square: green-ish
     [0.25, 0.35, 0.90]]  # triangle: blue-ish
)


def _place_box(rng, placed, min_size, max_size):
    """One tight box that overlaps every existing one by IoU <= 0.1."""
    from .boxes import iou_matrix

    for _ in range(60):
        w = rng.uniform(min_size, max_size)
        h = rng.uniform(min_size, max_size)
        cx = rng.uniform(w / 2 + 0.02, 0.98 - w / 2)
        cy = rng.uniform(h / 2 + 0.02, 0.98 - h / 2)
        box = np.array([cx, cy, w, h])
        if not placed or iou_matrix(box[None], np.array(placed)).max() <= 0.1:
            return box
    return None


def gen_scene(rng, image_size: int, domain: str = "source",
              scene_id: int = 0) -> Scene:
    """Render one labeled scene; deterministic given the generator state."""
    h = w = image_size
    ys = (np.arange(h) + 0.5)[:, None, None] / h
    xs = (np.arange(w) + 0.5)[None, :, None] / w

    base = rng.uniform(0.10, 0.40, 3)
    tilt = rng.uniform(-0.08, 0.08, (2, 3))
    image = base + ys * tilt[0] + xs * tilt[1]
    image = image + rng.normal(0.0, 0.02, (h, w, 3))

    n_objects = int(rng.integers(1, 7))
    boxes, classes = [], []
    for _ in range(n_objects):
        cls = int(rng.integers(0, 3))
        box = _place_box(rng, boxes, min_size=0.18, max_size=0.42)
        if box is None:
            continue
        cx, cy, bw, bh = box
        color = np.clip(_SHAPE_BASE_COLORS[cls] + rng.uniform(-0.12, 0.12, 3), 0.0, 1.0)
        if cls == 0:  # circle inscribed in a square box
            r = min(bw, bh) / 2.0
            bw = bh = 2.0 * r
            mask = ((xs[..., 0] - cx) / r) ** 2 + ((ys[..., 0] - cy) / r) ** 2 <= 1.0
        elif cls == 1:
            mask = (np.abs(xs[..., 0] - cx) <= bw / 2) & (np.abs(ys[..., 0] - cy) <= bh / 2)
        else:  # upward triangle: apex top-center, base at the bottom edge
            top, bottom = cy - bh / 2, cy + bh / 2
            frac = (ys[..., 0] - top) / bh
            mask = (frac >= 0) & (frac <= 1) & (np.abs(xs[..., 0] - cx) <= frac * bw / 2)
        image = np.where(mask[:, :, None], color[None, None, :], image)
        boxes.append([cx, cy, bw, bh])
        classes.append(cls)

    image = np.clip(image, 0.0, 1.0)
    return Scene(image, BoxSet(np.array(boxes), np.array(classes)), domain, scene_id)


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Separable mean filter with reflect padding; radius 0 is the identity."""
    if radius == 0:
        return image
    out = image
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for off in range(2 * radius + 1):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(off, off + out.shape[axis])
            acc += padded[tuple(sl)]
        out = acc / (2 * radius + 1)
    return out


def fogify(scene: Scene, params: FogParams, domain: str | None = None) -> Scene:
    """Blend a blurred, contrast-scaled copy toward the haze color; boxes are
    copied unchanged (the transform preserves content)."""
    beta = params.haze_intensity
    image = box_blur(scene.image, params.blur_radius) * params.contrast_scale
    image = image * (1.0 - beta) + params.haze_color[None, None, :] * beta
    return Scene(image, scene.boxes.copy(), domain or "target", scene.id)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _scene_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


@dataclass
class DatasetManifest:
    source: list[Scene]
    target_like: list[Scene]
    target_train: list[Scene]
    target_val: list[Scene]
    seed: int
    image_size: int
    target_train_label_reads: int = 0

    def quarantined_labels(self, index: int) -> BoxSet:
        """Target-train labels, reserved for diagnostics; every access is
        counted so tests can assert the training loop never looks."""
        self.target_train_label_reads += 1
        return self.target_train[index].boxes


def _worker_count() -> int:
    value = os.environ.get("MTM_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def build_splits(n_source: int, n_target: int, seed: int, image_size: int,
                 n_target_val: int | None = None) -> DatasetManifest:
    """Generate all four splits.  Target-like scenes are fogified copies of
    the source scenes (labels retained); target scenes are fresh content."""
    if min(n_source, n_target) < 1:
        raise ContractError("split sizes must be >= 1")
    if n_target_val is None:
        n_target_val = max(1, n_target // 2)

    def make_source(i):
        return gen_scene(_scene_rng(seed, _STREAM_SOURCE, i), image_size, "source", i)

    def make_target_like(scene):
        fog = draw_fog_params(_scene_rng(seed, _STREAM_TARGET_LIKE_FOG, scene.id))
        return fogify(scene, fog, "target_like")

    def make_target_train(i):
        scene = gen_scene(_scene_rng(seed, _STREAM_TARGET_TRAIN, i), image_size,
                          "target", _TARGET_TRAIN_ID_BASE + i)
        return fogify(scene, draw_fog_params(_scene_rng(seed, _STREAM_TARGET_TRAIN_FOG, i)),
                      "target")

    def make_target_val(i):
        scene = gen_scene(_scene_rng(seed, _STREAM_TARGET_VAL, i), image_size,
                          "target", _TARGET_VAL_ID_BASE + i)
        return fogify(scene, draw_fog_params(_scene_rng(seed, _STREAM_TARGET_VAL_FOG, i)),
                      "target")

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            source = list(pool.map(make_source, range(n_source)))
            target_like = list(pool.map(make_target_like, source))
            target_train = list(pool.map(make_target_train, range(n_target)))
            target_val = list(pool.map(make_target_val, range(n_target_val)))
    else:
        source = [make_source(i) for i in range(n_source)]
        target_like = [make_target_like(s) for s in source]
        target_train = [make_target_train(i) for i in range(n_target)]
        target_val = [make_target_val(i) for i in range(n_target_val)]

    return DatasetManifest(source, target_like, target_train, target_val,
                           seed, image_size)


@dataclass
class DomainBatch:
    image: np.ndarray
    boxes: BoxSet | None  # None when labels are withheld (target train)
    domain_label: float  # 0 = source, 1 = target or target-like
    scene_id: int
    split: str


def batch_iter(manifest: DatasetManifest, stage: str, rng):
    """One epoch of (source, counterpart) pairs.

    Pretraining pairs each source scene with its own fogified copy; the
    self-training stage pairs a shuffled source order against an
    independently shuffled run of unlabeled target scenes.
    """
    if stage not in ("pretrain", "selftrain"):
        raise ContractError(f"stage must be pretrain|selftrain, got {stage!r}")
    order = rng.permutation(len(manifest.source))
    if stage == "pretrain":
        for idx in order:
            src = manifest.source[idx]
            tl = manifest.target_like[idx]
            yield (
                DomainBatch(src.image, src.boxes, 0.0, src.id, "source"),
                DomainBatch(tl.image, tl.boxes, 1.0, tl.id, "target_like"),
            )
    else:
        t_order = rng.permutation(len(manifest.target_train))
        for step, idx in enumerate(order):
            src = manifest.source[idx]
            tgt = manifest.target_train[t_order[step % len(t_order)]]
            yield (
                DomainBatch(src.image, src.boxes, 0.0, src.id, "source"),
                DomainBatch(tgt.image, None, 1.0, tgt.id, "target_train"),
            )


# ---------------------------------------------------------------------------
# on-disk cache (PPM images, CSV annotations, manifest index)
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ContractError(f"not a binary PPM file: {path}")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise ContractError(f"unsupported PPM depth in {path}")
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def export_dataset(manifest: DatasetManifest, out_dir):
    """Write every split to disk.  Target-train annotations are withheld,
    matching the quarantine the in-memory iterator enforces."""
    os.makedirs(out_dir, exist_ok=True)
    index_lines = []
    labeled = {"source": manifest.source, "target_like": manifest.target_like,
               "target_val": manifest.target_val}
    with open(os.path.join(out_dir, "annotations.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "class_id", "cx", "cy", "w", "h"])
        for split, scenes in list(labeled.items()) + [("target_train", manifest.target_train)]:
            split_dir = os.path.join(out_dir, split)
            os.makedirs(split_dir, exist_ok=True)
            for scene in scenes:
                name = f"{split}/{scene.id:06d}.ppm"
                write_ppm(os.path.join(out_dir, name), scene.image)
                index_lines.append(f"{split} {scene.id} {name}")
                if split in labeled:
                    for box, cls in zip(scene.boxes.boxes, scene.boxes.classes):
                        writer.writerow([scene.id, int(cls)] + [repr(v) for v in box])
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(index_lines) + "\n")
