"""Co-training across prompt modalities.

Batches mix visual and text episodes 1:1; visual episodes alternate between
cross-image exemplars and two crop views of one scene. A linear
warmup/decay schedule drives decoupled-weight-decay Adam, and training state
round-trips through a versioned zip checkpoint for bit-exact resume.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import (
    EncoderSpec,
    PromptTokens,
    ValidationError,
    derive_seed,
    encode_text_prompts,
    encode_visual_prompts,
)
from .losses import GroundTruthSet, LossWeights, total_loss
from .model import SegModel
from .synthdata import AugmentConfig, Sample, ShapesDataset, augment, _resize_image, _resize_masks


class ScheduleError(ValidationError):
    """Step outside the schedule domain or malformed schedule config."""


class SamplingError(RuntimeError):
    """Episode construction exhausted its attempt budget."""


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the step and episode identities."""

    def __init__(self, step: int, episode_meta: list[dict]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.episode_meta = episode_meta


class CheckpointFormatError(ValidationError):
    """Checkpoint written by an incompatible format version."""


class CheckpointIntegrityError(ValidationError):
    """Checkpoint payload does not match its recorded checksum."""


@dataclass
class TrainConfig:
    steps: int = 50000
    batch_size: int = 64
    base_lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    scale_jitter: tuple[float, float] = (0.1, 2.0)
    crop_size: int = 896
    n_negatives: int = 8
    modalities: str = "both"

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValidationError(
                f"warmup_steps must lie in [0, steps), got {self.warmup_steps}")
        if self.modalities not in ("both", "visual", "text"):
            raise ValidationError(f"unknown modalities mode {self.modalities!r}")
        if self.n_negatives < 0:
            raise ValidationError(f"n_negatives must be >= 0, got {self.n_negatives}")


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> base_lr over warmup, then linear decay to 0 at cfg.steps."""
    if not 0 <= step <= cfg.steps:
        raise ScheduleError(f"step {step} outside [0, {cfg.steps}]")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / max(cfg.warmup_steps, 1)
    return cfg.base_lr * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


@dataclass
class Episode:
    target: Sample
    prompts: list[PromptTokens]
    gt: GroundTruthSet
    modality: str
    meta: dict = field(default_factory=dict)


def downsample_gt_masks(masks: list[np.ndarray], size: int) -> torch.Tensor:
    """Area-average full-resolution masks onto the mask-logit grid, threshold 0.5."""
    if not masks:
        return torch.zeros((0, size, size), dtype=torch.bool)
    t = torch.from_numpy(np.stack(masks).astype(np.float32))[None]
    frac = F.interpolate(t, size=(size, size), mode="area")[0]
    return frac >= 0.5


class EpisodeSampler:
    """Builds training episodes from a shapes dataset.

    All randomness flows through the generator handed to each method, so a
    (step, slot) seed pins the episode exactly.
    """

    def __init__(self, dataset: ShapesDataset, prompt_encoder: EncoderSpec,
                 text_seed: int, text_dim: int, cfg: TrainConfig, mask_size: int,
                 dtype: torch.dtype = torch.float32,
                 view_scale: tuple[float, float] = (0.6, 1.0)):
        if cfg.batch_size % 2:
            raise ValidationError(f"batch_size must be even, got {cfg.batch_size}")
        self.dataset = dataset
        self.prompt_encoder = prompt_encoder
        self.text_seed = text_seed
        self.text_dim = text_dim
        self.cfg = cfg
        self.mask_size = mask_size
        self.dtype = dtype
        self.view_scale = view_scale
        self.aug_cfg = AugmentConfig(flip_prob=0.5, scale_jitter=cfg.scale_jitter,
                                     crop_size=cfg.crop_size, min_visible=10)
        self.hosts: dict[int, list[int]] = {}
        for idx in dataset.train_indices:
            for cid in set(dataset.samples[idx].class_ids):
                self.hosts.setdefault(cid, []).append(idx)

    def _image_tensor(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(image)).to(self.dtype)

    def _gt_for_masks(self, masks: list[np.ndarray], class_ids: list[int],
                      columns: list[int]) -> GroundTruthSet:
        grid = downsample_gt_masks(masks, self.mask_size)
        keep = [i for i in range(grid.shape[0]) if bool(grid[i].any())]
        return GroundTruthSet(masks=grid[keep] if keep else grid[:0],
                              class_ids=[class_ids[i] for i in keep],
                              prompt_columns=[columns[i] for i in keep])

    def sample_visual_episode_crossimage(self, rng: np.random.Generator) -> Episode:
        eligible = sorted(c for c, hosts in self.hosts.items() if len(hosts) >= 2)
        if not eligible:
            raise SamplingError("no class appears in two or more training images")
        c = int(eligible[rng.integers(len(eligible))])
        pick = rng.choice(len(self.hosts[c]), size=2, replace=False)
        target_idx = self.hosts[c][int(pick[0])]
        exemplar_idx = self.hosts[c][int(pick[1])]
        exemplar = self.dataset.samples[exemplar_idx]
        # one token pooled over the union of the exemplar's class-c instances:
        # per-instance columns would make the CE target (column 0) punish the
        # twin columns of the same class
        union = np.zeros(exemplar.image.shape[1:], dtype=bool)
        for m, cid in zip(exemplar.masks, exemplar.class_ids):
            if cid == c:
                union |= m
        prompts = encode_visual_prompts(self._image_tensor(exemplar.image),
                                        [torch.from_numpy(union)], [c], self.prompt_encoder)
        target = None
        gt = None
        for _ in range(20):
            target = augment(self.dataset.samples[target_idx], rng, self.aug_cfg)
            masks = [m for m, cid in zip(target.masks, target.class_ids) if cid == c]
            gt = self._gt_for_masks(masks, [c] * len(masks), [0] * len(masks))
            if len(gt):
                break
        return Episode(target=target, prompts=[prompts], gt=gt, modality="visual",
                       meta={"strategy": "cross-image", "target": target_idx,
                             "exemplar": exemplar_idx, "class": c})

    def _view(self, sample: Sample, oy: int, ox: int, side: int) -> Sample:
        img = sample.image[:, oy:oy + side, ox:ox + side]
        masks = [m[oy:oy + side, ox:ox + side] for m in sample.masks]
        crop = self.cfg.crop_size
        if side != crop:
            img = _resize_image(np.ascontiguousarray(img), crop)
            masks = _resize_masks([np.ascontiguousarray(m) for m in masks], crop)
        return Sample(image=np.ascontiguousarray(img, dtype=np.float32), masks=list(masks),
                      class_ids=list(sample.class_ids), instance_ids=list(sample.instance_ids))

    def sample_visual_episode_cropviews(self, rng: np.random.Generator) -> Episode:
        for _ in range(50):
            idx = self.dataset.train_indices[int(rng.integers(len(self.dataset.train_indices)))]
            sample = self.dataset.samples[idx]
            if not sample.masks:
                continue
            shared = int(rng.integers(len(sample.masks)))
            try:
                return self._crop_view_episode(sample, shared, rng, idx)
            except SamplingError:
                continue
        raise SamplingError("crop-view sampling failed across 50 scene draws")

    def _crop_view_episode(self, sample: Sample, shared: int, rng: np.random.Generator,
                           idx: int) -> Episode:
        s = sample.image.shape[1]
        area = int(sample.masks[shared].sum())
        c = sample.class_ids[shared]
        for _ in range(20):
            windows = []
            for _ in range(2):
                side = int(round(s * float(rng.uniform(*self.view_scale))))
                side = min(max(side, 16), s)
                oy = int(rng.integers(0, s - side + 1))
                ox = int(rng.integers(0, s - side + 1))
                visible = int(sample.masks[shared][oy:oy + side, ox:ox + side].sum())
                windows.append((oy, ox, side, visible))
            if not all(w[3] >= 0.5 * area for w in windows):
                continue
            exemplar = self._view(sample, *windows[0][:3])
            target = self._view(sample, *windows[1][:3])
            if not exemplar.masks[shared].any():
                continue
            prompts = encode_visual_prompts(
                self._image_tensor(exemplar.image),
                [torch.from_numpy(exemplar.masks[shared])], [c], self.prompt_encoder)
            masks, cids = [], []
            for m, cid in zip(target.masks, target.class_ids):
                if cid == c and int(m.sum()) >= self.aug_cfg.min_visible:
                    masks.append(m)
                    cids.append(cid)
            gt = self._gt_for_masks(masks, cids, [0] * len(masks))
            if not len(gt):
                continue
            return Episode(target=target, prompts=[prompts], gt=gt, modality="visual",
                           meta={"strategy": "crop-views", "target": idx, "class": c})
        raise SamplingError("crop-view retention check failed for 20 window pairs")

    def sample_text_episode(self, rng: np.random.Generator) -> Episode:
        idx = self.dataset.train_indices[int(rng.integers(len(self.dataset.train_indices)))]
        target = augment(self.dataset.samples[idx], rng, self.aug_cfg)
        present = sorted(set(target.class_ids))
        absent = [c for c in range(len(self.dataset.vocab)) if c not in present]
        k = min(self.cfg.n_negatives, len(absent))
        negatives = ([absent[int(i)] for i in rng.choice(len(absent), size=k, replace=False)]
                     if k else [])
        cids = present + negatives
        order = rng.permutation(len(cids)) if cids else []
        prompt_ids = [cids[int(i)] for i in order]
        prompts = encode_text_prompts(prompt_ids, self.dataset.vocab, self.text_seed,
                                      self.text_dim, dtype=self.dtype)
        columns = [prompt_ids.index(cid) for cid in target.class_ids]
        gt = self._gt_for_masks(target.masks, target.class_ids, columns)
        return Episode(target=target, prompts=[prompts], gt=gt, modality="text",
                       meta={"strategy": "text", "target": idx, "prompt_ids": prompt_ids})

    def make_batch(self, step_seed: int) -> list[Episode]:
        """Deterministic batch for one step; even slots visual, odd slots text."""
        children = np.random.SeedSequence(step_seed).spawn(self.cfg.batch_size)
        episodes = []
        visual_count = 0
        for slot in range(self.cfg.batch_size):
            rng = np.random.default_rng(children[slot])
            if self.cfg.modalities == "both":
                is_visual = slot % 2 == 0
            else:
                is_visual = self.cfg.modalities == "visual"
            if is_visual:
                if visual_count % 2 == 0:
                    ep = self.sample_visual_episode_crossimage(rng)
                else:
                    ep = self.sample_visual_episode_cropviews(rng)
                visual_count += 1
            else:
                ep = self.sample_text_episode(rng)
            episodes.append(ep)
        return episodes


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay, eps=1e-8)


def train_step(model: SegModel, batch: list[Episode], optimizer: torch.optim.Optimizer,
               step: int, cfg: TrainConfig, weights: LossWeights) -> dict:
    """One optimizer update over a batch of episodes; returns loss and lr."""
    lr = lr_at_step(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    losses = []
    for ep in batch:
        image = torch.from_numpy(np.ascontiguousarray(ep.target.image)).to(model.dtype)
        out = model(image, ep.prompts)
        try:
            loss, _ = total_loss(out.scores, out.mask_logits, out.aux, ep.gt, weights)
        except ValidationError as err:
            # non-finite matching costs are the first symptom of a blown-up model
            raise TrainingDivergedError(step, [e.meta for e in batch]) from err
        losses.append(loss)
    total = torch.stack(losses).mean()
    if not torch.isfinite(total):
        raise TrainingDivergedError(step, [ep.meta for ep in batch])
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {"loss": float(total.detach()), "lr": lr}


def step_seed_for(train_seed: int, step: int) -> int:
    return derive_seed("train-step", train_seed, step)


@dataclass
class FitResult:
    history: list[tuple[int, float, float]]
    checkpoint_path: Path | None


def fit(model: SegModel, dataset: ShapesDataset, cfg: TrainConfig, weights: LossWeights,
        *, text_seed: int = 11, out_dir: str | Path | None = None, log_fn=None,
        resume: str | Path | None = None, checkpoint_every: int = 0,
        config_echo: dict | None = None,
        view_scale: tuple[float, float] = (0.6, 1.0)) -> FitResult:
    """Run the schedule from scratch or from a checkpoint.

    Per-step batches are seeded independently of loop state, so resuming at
    step s reproduces the uninterrupted run bit for bit.
    """
    for s in model.pool:
        if cfg.crop_size % s.stride:
            raise ValidationError(
                f"crop_size {cfg.crop_size} not divisible by encoder stride {s.stride}")
    fine = min(s.stride for s in model.pool)
    mask_size = cfg.crop_size * 4 // fine
    sampler = EpisodeSampler(dataset, model.prompt_encoder, text_seed, model.cfg.text_dim,
                             cfg, mask_size, dtype=model.dtype, view_scale=view_scale)
    optimizer = build_optimizer(model, cfg)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        restore_into(model, optimizer, ckpt)
        start = ckpt.step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    last_path = None
    for step in range(start + 1, cfg.steps + 1):
        batch = sampler.make_batch(step_seed_for(cfg.seed, step))
        stats = train_step(model, batch, optimizer, step, cfg, weights)
        history.append((step, stats["loss"], stats["lr"]))
        if log_fn is not None:
            log_fn(step, stats["loss"], stats["lr"])
        if out is not None and ((checkpoint_every and step % checkpoint_every == 0)
                                or step == cfg.steps):
            last_path = out / f"step{step:06d}.ckpt"
            save_checkpoint(last_path, model, optimizer, step, config_echo or {})
    return FitResult(history=history, checkpoint_path=last_path)


CHECKPOINT_FORMAT = 1


@dataclass
class CheckpointData:
    step: int
    config: dict
    arrays: dict[str, np.ndarray]


def _payload_arrays(model: SegModel, optimizer: torch.optim.Optimizer | None) -> dict[str, np.ndarray]:
    arrays = {f"model/{k}": v.detach().cpu().numpy().copy()
              for k, v in model.state_dict().items()}
    if optimizer is not None:
        for name, p in model.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            arrays[f"optim/{name}/step"] = np.asarray(float(state["step"]), dtype=np.float64)
            arrays[f"optim/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
            arrays[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
    return arrays


def _payload_checksum(arrays: dict[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: SegModel, optimizer: torch.optim.Optimizer | None,
                    step: int, config_echo: dict | None = None):
    """Versioned zip of manifest + one .npy per tensor, checksummed."""
    arrays = _payload_arrays(model, optimizer)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config": config_echo or {},
        "arrays": {k: {"shape": list(a.shape), "dtype": str(a.dtype)}
                   for k, a in sorted(arrays.items())},
        "sha256": _payload_checksum(arrays),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def write(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(2020, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        write("manifest.json", json.dumps(manifest, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            write(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointFormatError(
                f"checkpoint format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT}")
        arrays = {}
        for name in manifest["arrays"]:
            arrays[name] = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")))
    if _payload_checksum(arrays) != manifest["sha256"]:
        raise CheckpointIntegrityError(f"checksum mismatch in {path}")
    return CheckpointData(step=int(manifest["step"]), config=manifest.get("config", {}),
                          arrays=arrays)


def restore_into(model: SegModel, optimizer: torch.optim.Optimizer | None,
                 ckpt: CheckpointData):
    """Load model tensors and per-parameter Adam moments back in place."""
    state = {k[len("model/"):]: torch.from_numpy(v.copy())
             for k, v in ckpt.arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if optimizer is None:
        return
    optimizer.state.clear()
    for name, p in model.named_parameters():
        key = f"optim/{name}/step"
        if key not in ckpt.arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ckpt.arrays[key])),
            "exp_avg": torch.from_numpy(ckpt.arrays[f"optim/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"optim/{name}/exp_avg_sq"].copy()),
        }
