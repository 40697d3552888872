"""Collaborative inference on a trained model.

Prompt groups from either modality (or their per-class fusion) run through
the same forward pass; query scores are reduced per class, thresholded, and
rendered into instance, semantic, and panoptic views of one prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import (
    FUSED,
    TEXT,
    VISUAL,
    EmptyMaskError,
    PromptTokens,
    ShapeError,
    ValidationError,
    encode_visual_prompts,
)
from .metrics import VOID
from .model import SegModel


class ModelStateError(RuntimeError):
    """Model parameters contain non-finite values; refusing to predict."""


@dataclass
class InstancePrediction:
    mask: np.ndarray          # (H, W) bool at input resolution
    class_id: int
    confidence: float
    instance_id: int | None = None


@dataclass
class PanopticSegment:
    segment_id: int
    class_id: int
    is_thing: bool


@dataclass
class SegmentationResult:
    instances: list[InstancePrediction]
    semantic: np.ndarray         # (H, W) int, VOID where uncovered
    panoptic_ids: np.ndarray     # (H, W) int, 0 where unassigned
    panoptic_segments: list[PanopticSegment]


def fuse_prompts(visual: PromptTokens, text: PromptTokens) -> PromptTokens:
    """Average adapted tokens per class across modalities; one row per class.

    Classes present in only one modality pass through. Output rows are
    ordered by ascending class id.
    """
    if visual.modality not in (VISUAL, FUSED) or text.modality != TEXT:
        raise ValidationError(
            f"fusion expects a visual and a text group, got {visual.modality!r} "
            f"and {text.modality!r}")
    if len(visual) and len(text) and visual.embeddings.shape[1] != text.embeddings.shape[1]:
        raise ShapeError(
            f"fusion widths differ: {visual.embeddings.shape[1]} vs {text.embeddings.shape[1]}")

    def per_class(tokens: PromptTokens) -> dict[int, torch.Tensor]:
        groups: dict[int, list[torch.Tensor]] = {}
        for row, cid in zip(tokens.embeddings, tokens.class_ids):
            groups.setdefault(int(cid), []).append(row)
        return {c: torch.stack(rows).mean(dim=0) for c, rows in groups.items()}

    v_means = per_class(visual)
    t_means = per_class(text)
    class_ids = sorted(set(v_means) | set(t_means))
    rows = []
    for c in class_ids:
        if c in v_means and c in t_means:
            rows.append((v_means[c] + t_means[c]) / 2.0)
        else:
            rows.append(v_means.get(c, t_means.get(c)))
    width = visual.embeddings.shape[1] if len(visual) else text.embeddings.shape[1]
    emb = torch.stack(rows) if rows else visual.embeddings.new_zeros((0, width))
    return PromptTokens(embeddings=emb, class_ids=class_ids, modality=FUSED)


def _check_model_state(model: SegModel):
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise ModelStateError("model parameters contain non-finite values")


def _pad_to_strides(image: torch.Tensor, strides: list[int]) -> tuple[torch.Tensor, int, int]:
    _, h, w = image.shape
    m = math.lcm(*strides)
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph or pw:
        image = F.pad(image[None], (0, pw, 0, ph))[0]
    return image, h, w


def _group_columns(keys: list) -> dict:
    cols: dict = {}
    for j, key in enumerate(keys):
        if key is None:
            continue
        cols.setdefault(key, []).append(j)
    return cols


def effective_class_scores(logits: np.ndarray, column_keys: list) -> dict[int, np.ndarray]:
    """Per-key query probability: max-reduce same-key columns, then softmax.

    Reduction happens on logits, before the softmax, so a duplicated exemplar
    column collapses into its twin instead of splitting probability mass; the
    trailing no-object column always stays in the softmax as the rejection
    option. Keys are class ids (or instance ids for tracking); None is skipped.
    """
    cols = _group_columns(column_keys)
    if not cols:
        return {}
    keys = sorted(cols)
    reduced = np.stack([logits[:, cols[c]].max(axis=1) for c in keys]
                       + [logits[:, -1]], axis=1)
    z = reduced - reduced.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return {c: p[:, i] for i, c in enumerate(keys)}


def _forward_scores(model: SegModel, image: torch.Tensor,
                    prompts: list[PromptTokens]) -> tuple[np.ndarray, np.ndarray, list[int], list]:
    """Run the model and return (score logits, upsampled mask probs, column meta)."""
    image, h, w = _pad_to_strides(image.to(model.dtype), [s.stride for s in model.pool])
    with torch.no_grad():
        out = model(image, prompts)
        mask_logits = out.mask_logits.logits
        up = F.interpolate(mask_logits[None], size=image.shape[1:], mode="bilinear",
                           align_corners=False)[0]
        mask_probs = torch.sigmoid(up[:, :h, :w])
    inst_ids = out.scores.column_instance_ids
    if inst_ids is None:
        inst_ids = [None] * len(out.scores.column_class_ids)
    return (out.scores.logits.detach().cpu().numpy(), mask_probs.cpu().numpy(),
            list(out.scores.column_class_ids), list(inst_ids))


def postprocess(score_logits: np.ndarray, column_class_ids: list[int], mask_probs: np.ndarray,
                score_threshold: float, mask_threshold: float, overlap_keep: float,
                stuff_flags: dict[int, bool] | None = None) -> SegmentationResult:
    """Turn query score logits and mask probabilities into the three output views.

    Semantic labels are argmax over per-class soft evidence restricted to the
    emitted binary masks, so a pixel is void exactly when no instance covers
    it. Panoptic segments paste in confidence order and survive only when at
    least overlap_keep of their area is still visible; stuff classes collapse
    to one segment first.
    """
    stuff_flags = stuff_flags or {}
    by_class = effective_class_scores(score_logits, column_class_ids)
    h, w = mask_probs.shape[1:]
    instances: list[InstancePrediction] = []
    queries: list[int] = []
    if by_class:
        classes = sorted(by_class)
        table = np.stack([by_class[c] for c in classes], axis=1)  # (K, n_classes)
        conf = table.max(axis=1)
        cls = np.asarray(classes)[table.argmax(axis=1)]
        binary = mask_probs >= mask_threshold
        for k in range(score_logits.shape[0]):
            if conf[k] >= score_threshold and binary[k].any():
                instances.append(InstancePrediction(mask=binary[k], class_id=int(cls[k]),
                                                    confidence=float(conf[k])))
                queries.append(k)

    semantic = np.full((h, w), VOID, dtype=np.int64)
    if instances:
        all_classes = sorted({inst.class_id for inst in instances})
        votes = np.zeros((len(all_classes), h, w), dtype=np.float64)
        for inst, k in zip(instances, queries):
            ci = all_classes.index(inst.class_id)
            votes[ci] += inst.confidence * mask_probs[k] * inst.mask
        covered = votes.sum(axis=0) > 0
        semantic[covered] = np.asarray(all_classes)[votes.argmax(axis=0)][covered]

    merged: list[tuple[np.ndarray, int, float, bool]] = []
    stuff_union: dict[int, tuple[np.ndarray, float]] = {}
    for inst in instances:
        if stuff_flags.get(inst.class_id, False):
            prev = stuff_union.get(inst.class_id)
            if prev is None:
                stuff_union[inst.class_id] = (inst.mask.copy(), inst.confidence)
            else:
                stuff_union[inst.class_id] = (prev[0] | inst.mask,
                                              max(prev[1], inst.confidence))
        else:
            merged.append((inst.mask, inst.class_id, inst.confidence, True))
    for cid, (mask, confidence) in sorted(stuff_union.items()):
        merged.append((mask, cid, confidence, False))

    panoptic_ids = np.zeros((h, w), dtype=np.int64)
    segments: list[PanopticSegment] = []
    claimed = np.zeros((h, w), dtype=bool)
    next_id = 1
    for mask, cid, confidence, is_thing in sorted(merged, key=lambda m: -m[2]):
        visible = mask & ~claimed
        total = int(mask.sum())
        if total == 0 or visible.sum() / total < overlap_keep:
            continue
        panoptic_ids[visible] = next_id
        segments.append(PanopticSegment(segment_id=next_id, class_id=cid, is_thing=is_thing))
        claimed |= visible
        next_id += 1
    return SegmentationResult(instances=instances, semantic=semantic,
                              panoptic_ids=panoptic_ids, panoptic_segments=segments)


def segment(model: SegModel, image: torch.Tensor | np.ndarray,
            visual: PromptTokens | None = None, text: PromptTokens | None = None,
            *, stuff_flags: dict[int, bool] | None = None, score_threshold: float = 0.5,
            mask_threshold: float = 0.5, overlap_keep: float = 0.8) -> SegmentationResult:
    """Predict with text, visual, or fused prompts through one shared path."""
    if visual is None and text is None:
        raise ValidationError("segment needs at least one prompt modality")
    _check_model_state(model)
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if visual is not None and text is not None and len(visual) and len(text):
        fused = fuse_prompts(model.adapt_tokens(visual), model.adapt_tokens(text))
        prompts = [fused]
    else:
        prompts = [g for g in (visual, text) if g is not None and len(g)]
        if not prompts:
            raise ValidationError("all prompt groups are empty")
    logits, mask_probs, col_cids, _ = _forward_scores(model, image, prompts)
    return postprocess(logits, col_cids, mask_probs, score_threshold, mask_threshold,
                       overlap_keep, stuff_flags)


def build_fewshot_prompts(examples: list[tuple[torch.Tensor, list[torch.Tensor], list[int]]],
                          model: SegModel) -> PromptTokens:
    """Concatenate pooled tokens from several exemplar images into one group."""
    if not examples:
        raise ValidationError("few-shot prompt set needs at least one example")
    groups = [encode_visual_prompts(img, masks, cids, model.prompt_encoder)
              for img, masks, cids in examples]
    emb = torch.cat([g.embeddings for g in groups], dim=0)
    cids = [c for g in groups for c in g.class_ids]
    return PromptTokens(embeddings=emb, class_ids=cids, modality=VISUAL)


@dataclass
class MemoryBank:
    """Rolling store of per-frame prompt tokens with a pinned first entry."""

    capacity: int
    pinned_first: bool = True
    entries: list[PromptTokens] = field(default_factory=list)
    max_size_seen: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError(f"bank capacity must be >= 1, got {self.capacity}")

    def append(self, tokens: PromptTokens):
        self.entries.append(tokens)
        while len(self.entries) > self.capacity:
            drop = 1 if self.pinned_first and len(self.entries) > 1 else 0
            self.entries.pop(drop)
        self.max_size_seen = max(self.max_size_seen, len(self.entries))

    def prompt_groups(self) -> list[PromptTokens]:
        return list(self.entries)


@dataclass
class VideoFrameResult:
    masks: dict[int, np.ndarray]
    scores: dict[int, float]


def propagate_video(model: SegModel, frames: list[np.ndarray],
                    first_masks: list[np.ndarray], first_class_ids: list[int],
                    *, capacity: int = 8, score_threshold: float = 0.5,
                    mask_threshold: float = 0.5,
                    bank: MemoryBank | None = None) -> list[VideoFrameResult]:
    """Track first-frame objects through a clip via pooled-token memory.

    Object identity rides on prompt instance ids; each frame's confident
    predictions are pooled back into the bank for the frames after it.
    """
    if not frames:
        raise ValidationError("empty frame list")
    if not first_masks:
        raise ValidationError("need at least one first-frame object mask")
    _check_model_state(model)
    for m in first_masks:
        if not np.asarray(m).any():
            raise EmptyMaskError("first-frame object mask is empty")
    ids = list(range(len(first_masks)))
    if bank is None:
        bank = MemoryBank(capacity=capacity)
    frame0 = torch.from_numpy(np.ascontiguousarray(frames[0])).to(model.dtype)
    bank.append(encode_visual_prompts(frame0, [torch.from_numpy(np.asarray(m)) for m in first_masks],
                                      list(first_class_ids), model.prompt_encoder,
                                      instance_ids=ids))
    results = [VideoFrameResult(masks={i: np.asarray(first_masks[i], dtype=bool) for i in ids},
                                scores={i: 1.0 for i in ids})]
    class_of = dict(zip(ids, first_class_ids))
    for t in range(1, len(frames)):
        frame = torch.from_numpy(np.ascontiguousarray(frames[t]))
        logits, mask_probs, _, col_iids = _forward_scores(model, frame, bank.prompt_groups())
        by_id = effective_class_scores(logits, col_iids)
        masks_t: dict[int, np.ndarray] = {}
        scores_t: dict[int, float] = {}
        bank_masks, bank_cids, bank_iids = [], [], []
        for obj in ids:
            if obj not in by_id:
                masks_t[obj] = np.zeros(mask_probs.shape[1:], dtype=bool)
                scores_t[obj] = 0.0
                continue
            k = int(by_id[obj].argmax())
            score = float(by_id[obj][k])
            mask = mask_probs[k] >= mask_threshold
            # tracked objects always emit their best mask; the confidence
            # gate only controls what is pooled back into the bank
            masks_t[obj] = mask
            scores_t[obj] = score
            if score >= score_threshold and mask.any():
                bank_masks.append(torch.from_numpy(mask))
                bank_cids.append(class_of[obj])
                bank_iids.append(obj)
        if bank_masks:
            bank.append(encode_visual_prompts(frame.to(model.dtype), bank_masks, bank_cids,
                                              model.prompt_encoder, instance_ids=bank_iids))
        results.append(VideoFrameResult(masks=masks_t, scores=scores_t))
    return results
