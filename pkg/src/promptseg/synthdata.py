"""Synthetic shapes benchmark.

Deterministic scene generation (class = shape identity, color is nuisance),
PNG round-trip storage, an index-hash train/val split, scale-jitter
augmentation, and short translating-shape videos for mask propagation.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .encoders import ClassVocabulary, ShapeError, ValidationError

log = logging.getLogger(__name__)

SHAPE_NAMES = ("circle", "square", "triangle", "star", "cross", "ring")

PALETTE = (
    (0.85, 0.20, 0.20),
    (0.20, 0.78, 0.25),
    (0.22, 0.35, 0.90),
    (0.92, 0.86, 0.20),
    (0.80, 0.25, 0.80),
    (0.25, 0.80, 0.85),
)

BACKGROUND_GRAY = 0.25

# Salt for the index-hash split; buckets hash to 10 bins and bin 0 is val.
SPLIT_SALT = "shapes-split-v22"

ANNOTATION_FORMAT = 1

_PLACEMENT_ATTEMPTS = 100


class IntegrityError(ValidationError):
    """Dataset directory is missing files or inconsistent with its index."""


class DatasetExistsError(FileExistsError):
    """Refusing to overwrite an existing dataset without force."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    n_instances: tuple[int, int] = (1, 3)
    shape_classes: tuple[str, ...] = ("circle", "square", "triangle")
    color_classes: tuple[tuple[float, float, float], ...] = PALETTE
    background_noise: float = 0.05
    overlap_allowed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValidationError(f"image_size must be >= 32, got {self.image_size}")
        lo, hi = self.n_instances
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad n_instances range {self.n_instances}")
        for name in self.shape_classes:
            if name not in SHAPE_NAMES:
                raise ValidationError(f"unknown shape class {name!r}")
        if len(set(self.shape_classes)) != len(self.shape_classes):
            raise ValidationError("shape_classes must be unique")
        if not self.color_classes:
            raise ValidationError("color_classes must list at least one color")
        for color in self.color_classes:
            if len(color) != 3 or not all(0.0 <= c <= 1.0 for c in color):
                raise ValidationError(f"bad palette color {color!r}")


@dataclass
class Sample:
    """One scene: image in [0, 1], one boolean mask per instance."""

    image: np.ndarray                 # (3, S, S) float32
    masks: list[np.ndarray]           # each (S, S) bool
    class_ids: list[int]
    instance_ids: list[int]

    def __post_init__(self):
        for m in self.masks:
            if m.shape != self.image.shape[1:]:
                raise ShapeError(f"mask {m.shape} off image grid {self.image.shape[1:]}")
        if not (len(self.masks) == len(self.class_ids) == len(self.instance_ids)):
            raise ValidationError("masks, class_ids and instance_ids must align")


@dataclass
class ShapeInstance:
    kind: str
    class_id: int
    cx: float
    cy: float
    radius: float
    phase: float
    color: tuple[float, float, float]


def rasterize_shape(kind: str, size: int, cx: float, cy: float, r: float,
                    phase: float = 0.0) -> np.ndarray:
    """Boolean mask of one shape on a size x size grid, pixel centers at integers."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    dist = np.hypot(dx, dy)
    if kind == "circle":
        return dist <= r
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.82 * r
    if kind == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.55 * (dy + r))
    if kind == "star":
        theta = np.arctan2(dy, dx)
        lobe = 0.5 + 0.5 * np.cos(5.0 * (theta - phase))
        return dist <= r * (0.35 + 0.65 * lobe ** 1.5)
    if kind == "cross":
        arm = 0.34 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    raise ValidationError(f"unknown shape kind {kind!r}")


# farthest support point per kind, in units of the nominal radius; square
# corners and the triangle base overshoot r, so containment pads use these
_REACH = {
    "circle": 1.0,
    "square": 0.82 * np.sqrt(2.0),
    "triangle": float(np.hypot(0.8, 0.99)),
    "star": 1.0,
    "cross": float(np.hypot(1.0, 0.34)),
    "ring": 1.0,
}


def _masks_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return bool((a & b).any())


def place_instances(spec: SceneSpec, rng: np.random.Generator,
                    margin: float = 0.0) -> list[ShapeInstance]:
    """Rejection-sample instance placements fully inside the canvas.

    margin widens the exclusion radius around already placed instances;
    an instance that cannot be placed within the attempt budget is skipped.
    """
    s = spec.image_size
    lo, hi = spec.n_instances
    n = int(rng.integers(lo, hi + 1))
    placed: list[ShapeInstance] = []
    taken: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(_PLACEMENT_ATTEMPTS):
            kind = spec.shape_classes[int(rng.integers(len(spec.shape_classes)))]
            r = float(rng.uniform(0.10, 0.19)) * s
            pad = _REACH[kind] * r + 2.0
            if 2 * pad >= s - 1:
                continue
            cx = float(rng.uniform(pad, s - 1 - pad))
            cy = float(rng.uniform(pad, s - 1 - pad))
            phase = float(rng.uniform(0.0, 2.0 * np.pi))
            mask = rasterize_shape(kind, s, cx, cy, r, phase)
            if mask.sum() < 25:
                continue
            if not spec.overlap_allowed and margin > 0:
                near = any(np.hypot(p.cx - cx, p.cy - cy)
                           < _REACH[p.kind] * p.radius + _REACH[kind] * r + margin
                           for p in placed)
                if near:
                    continue
            if not spec.overlap_allowed and any(_masks_overlap(mask, t) for t in taken):
                continue
            # color drawn independently of the class: appearance is nuisance
            color = spec.color_classes[int(rng.integers(len(spec.color_classes)))]
            placed.append(ShapeInstance(kind, spec.shape_classes.index(kind),
                                        cx, cy, r, phase, color))
            taken.append(mask)
            break
        else:
            log.warning("skipping unplaceable instance after %d attempts", _PLACEMENT_ATTEMPTS)
    return placed


def render_scene(instances: list[ShapeInstance], spec: SceneSpec,
                 noise: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Compose shapes over a noisy gray background; returns image and masks."""
    s = spec.image_size
    image = np.full((3, s, s), BACKGROUND_GRAY, dtype=np.float64) + noise
    masks = []
    for inst in instances:
        mask = rasterize_shape(inst.kind, s, inst.cx, inst.cy, inst.radius, inst.phase)
        for c in range(3):
            image[c][mask] = inst.color[c] + noise[c][mask]
        masks.append(mask)
    return np.clip(image, 0.0, 1.0), masks


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def make_sample(spec: SceneSpec, index: int) -> Sample:
    """Generate scene number index; fully determined by (spec, index)."""
    rng = np.random.default_rng([abs(spec.seed), index])
    instances = place_instances(spec, rng)
    s = spec.image_size
    noise = rng.uniform(-spec.background_noise, spec.background_noise, size=(3, s, s))
    image, masks = render_scene(instances, spec, noise)
    image = _quantize(image).astype(np.float32) / 255.0
    return Sample(image=image, masks=[m.copy() for m in masks],
                  class_ids=[i.class_id for i in instances],
                  instance_ids=list(range(len(instances))))


def split_of(index: int) -> str:
    """Stable train/val split keyed only by the scene index."""
    digest = hashlib.blake2b(f"{SPLIT_SALT}:{index}".encode(), digest_size=8).digest()
    return "val" if int.from_bytes(digest, "little") % 10 == 0 else "train"


class ShapesDataset:
    def __init__(self, samples: list[Sample], vocab: ClassVocabulary, image_size: int):
        self.samples = samples
        self.vocab = vocab
        self.image_size = image_size
        self.train_indices = [i for i in range(len(samples)) if split_of(i) == "train"]
        self.val_indices = [i for i in range(len(samples)) if split_of(i) == "val"]

    def __len__(self) -> int:
        return len(self.samples)

    def train_samples(self) -> list[Sample]:
        return [self.samples[i] for i in self.train_indices]

    def val_samples(self) -> list[Sample]:
        return [self.samples[i] for i in self.val_indices]


def generate_dataset(spec: SceneSpec, n_images: int, out_dir: str | Path,
                     force: bool = False) -> dict:
    """Write scenes, masks, vocabulary and annotation index under out_dir."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetExistsError(f"{out} already exists; pass force to overwrite")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    class_counts = {name: 0 for name in spec.shape_classes}
    for idx in range(n_images):
        sample = make_sample(spec, idx)
        img_rel = f"images/{idx:05d}.png"
        arr = np.moveaxis(_quantize(sample.image), 0, 2)
        Image.fromarray(arr, mode="RGB").save(out / img_rel)
        inst_entries = []
        for j, (mask, cid) in enumerate(zip(sample.masks, sample.class_ids)):
            mask_rel = f"masks/{idx:05d}_{j}.png"
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / mask_rel)
            inst_entries.append({"mask": mask_rel, "class": spec.shape_classes[cid],
                                 "instance": j})
            class_counts[spec.shape_classes[cid]] += 1
        entries.append({"id": idx, "file": img_rel, "split": split_of(idx),
                        "instances": inst_entries})
    index = {
        "format": ANNOTATION_FORMAT,
        "image_size": spec.image_size,
        "classes": list(spec.shape_classes),
        "images": entries,
    }
    (out / "annotations.json").write_text(json.dumps(index, indent=1))
    (out / "vocab.txt").write_text("".join(f"{n}\n" for n in spec.shape_classes))
    n_val = sum(1 for e in entries if e["split"] == "val")
    return {"n_images": n_images, "n_train": n_images - n_val, "n_val": n_val,
            "class_counts": class_counts}


def load_dataset(root: str | Path) -> ShapesDataset:
    """Read a generated dataset back; missing or inconsistent files raise."""
    root = Path(root)
    index_path = root / "annotations.json"
    if not index_path.exists():
        raise IntegrityError(f"no annotations.json under {root}")
    index = json.loads(index_path.read_text())
    if index.get("format") != ANNOTATION_FORMAT:
        raise IntegrityError(f"unsupported annotation format {index.get('format')!r}")
    vocab_path = root / "vocab.txt"
    if not vocab_path.exists():
        raise IntegrityError(f"no vocab.txt under {root}")
    names = [line for line in vocab_path.read_text().splitlines() if line]
    if names != list(index["classes"]):
        raise IntegrityError("vocab.txt disagrees with annotations.json classes")
    vocab = ClassVocabulary(names=names)
    size = int(index["image_size"])
    samples = []
    for entry in index["images"]:
        img_path = root / entry["file"]
        if not img_path.exists():
            raise IntegrityError(f"missing image file {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (size, size):
            raise IntegrityError(f"image {img_path} has size {arr.shape[:2]}, expected {size}")
        image = np.moveaxis(arr, 2, 0).astype(np.float32) / 255.0
        masks, cids, iids = [], [], []
        for inst in entry["instances"]:
            mask_path = root / inst["mask"]
            if not mask_path.exists():
                raise IntegrityError(f"missing mask file {mask_path}")
            with Image.open(mask_path) as im:
                masks.append(np.asarray(im.convert("L")) > 127)
            cids.append(vocab.id_of(inst["class"]))
            iids.append(int(inst["instance"]))
        samples.append(Sample(image=image, masks=masks, class_ids=cids, instance_ids=iids))
    return ShapesDataset(samples=samples, vocab=vocab, image_size=size)


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_jitter: tuple[float, float] = (0.1, 2.0)
    crop_size: int = 128
    min_visible: int = 10

    def __post_init__(self):
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ValidationError(f"bad scale_jitter range {self.scale_jitter}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass
class AugmentParams:
    flipped: bool
    scale: float
    scaled_size: int
    window: tuple[int, int]   # top-left of the crop inside the scaled image
    paste: tuple[int, int]    # top-left of the scaled image inside the crop


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def _resize_masks(masks: list[np.ndarray], size: int) -> list[np.ndarray]:
    if not masks:
        return []
    t = torch.from_numpy(np.stack(masks).astype(np.float32))[None]
    out = F.interpolate(t, size=(size, size), mode="nearest-exact")[0]
    return [m.numpy() > 0.5 for m in out]


def augment_with_params(sample: Sample, rng: np.random.Generator,
                        cfg: AugmentConfig) -> tuple[Sample, AugmentParams]:
    """Flip, scale-jitter and crop to a fixed square; masks track the image.

    The rng draw order is fixed (flip, scale, two offsets) so a seed fully
    determines the output. Instances whose visible area drops below the
    threshold are dropped from the target set.
    """
    s = sample.image.shape[1]
    flip_draw = float(rng.random())
    scale = float(rng.uniform(*cfg.scale_jitter))
    image = sample.image
    masks = sample.masks
    flipped = flip_draw < cfg.flip_prob
    if flipped:
        image = image[:, :, ::-1].copy()
        masks = [m[:, ::-1].copy() for m in masks]
    scaled = max(1, int(round(s * scale)))
    if scaled != s:
        image = _resize_image(image, scaled)
        masks = _resize_masks(masks, scaled)
    crop = cfg.crop_size
    span = abs(scaled - crop) + 1
    oy = int(rng.integers(0, span))
    ox = int(rng.integers(0, span))
    if scaled >= crop:
        window, paste = (oy, ox), (0, 0)
        out_img = image[:, oy:oy + crop, ox:ox + crop]
        out_masks = [m[oy:oy + crop, ox:ox + crop] for m in masks]
    else:
        window, paste = (0, 0), (oy, ox)
        out_img = np.zeros((3, crop, crop), dtype=image.dtype)
        out_img[:, oy:oy + scaled, ox:ox + scaled] = image
        out_masks = []
        for m in masks:
            full = np.zeros((crop, crop), dtype=bool)
            full[oy:oy + scaled, ox:ox + scaled] = m
            out_masks.append(full)
    keep = [i for i, m in enumerate(out_masks) if int(m.sum()) >= cfg.min_visible]
    result = Sample(
        image=np.ascontiguousarray(out_img, dtype=np.float32),
        masks=[np.ascontiguousarray(out_masks[i]) for i in keep],
        class_ids=[sample.class_ids[i] for i in keep],
        instance_ids=[sample.instance_ids[i] for i in keep],
    )
    return result, AugmentParams(flipped, scale, scaled, window, paste)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    return augment_with_params(sample, rng, cfg)[0]


def make_video(spec: SceneSpec, n_frames: int, seed: int, max_speed: float = 1.5,
               ) -> tuple[list[np.ndarray], list[list[np.ndarray]], list[int]]:
    """Translating-shape clip: frames, per-instance mask tracks, class ids.

    Shapes drift along straight lines chosen to stay inside the canvas and
    clear of each other for the whole clip, so every track mask is the full
    shape. Background noise is frozen across frames.
    """
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    rng = np.random.default_rng([abs(spec.seed), abs(seed), 7])
    drift = max_speed * (n_frames - 1)
    video_spec = replace(spec, overlap_allowed=False)
    instances = place_instances(video_spec, rng, margin=2.0 * drift + 2.0)
    s = spec.image_size
    velocities = []
    for inst in instances:
        pad = _REACH[inst.kind] * inst.radius + 2.0
        for _ in range(_PLACEMENT_ATTEMPTS):
            v = rng.uniform(-max_speed, max_speed, size=2)
            end_x = inst.cx + v[0] * (n_frames - 1)
            end_y = inst.cy + v[1] * (n_frames - 1)
            if pad <= end_x <= s - 1 - pad and pad <= end_y <= s - 1 - pad:
                velocities.append(v)
                break
        else:
            velocities.append(np.zeros(2))
    noise = rng.uniform(-spec.background_noise, spec.background_noise, size=(3, s, s))
    frames, tracks = [], [[] for _ in instances]
    for t in range(n_frames):
        moved = [replace(inst, cx=inst.cx + v[0] * t, cy=inst.cy + v[1] * t)
                 for inst, v in zip(instances, velocities)]
        image, masks = render_scene(moved, spec, noise)
        frames.append((_quantize(image).astype(np.float32) / 255.0))
        for i, m in enumerate(masks):
            tracks[i].append(m)
    return frames, tracks, [inst.class_id for inst in instances]
