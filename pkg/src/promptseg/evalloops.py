"""Dataset-level evaluation protocols.

One routine per prompt mode (text, one-shot visual, fused, few-shot) plus
video propagation, all built on segment() and the metric aggregators so the
CLI and the benchmark suite share one code path.
"""

from __future__ import annotations

import numpy as np
import torch

from .encoders import PromptTokens, ValidationError, VISUAL, encode_text_prompts, \
    encode_visual_prompts
from .inference import MemoryBank, build_fewshot_prompts, propagate_video, segment
from .metrics import (
    VOID,
    DetectionAggregator,
    MetricReport,
    PanopticAggregator,
    SemanticIoUAggregator,
)
from .model import SegModel
from .synthdata import SceneSpec, Sample, ShapesDataset, make_video

EVAL_MODES = ("text", "visual", "fused", "fewshot")


def semantic_gt(sample: Sample) -> np.ndarray:
    """Class-id grid from instance masks; background stays void."""
    out = np.full(sample.image.shape[1:], VOID, dtype=np.int64)
    for mask, cid in zip(sample.masks, sample.class_ids):
        out[mask] = cid
    return out


def gt_segments(sample: Sample) -> list[tuple[np.ndarray, int]]:
    return [(m.astype(bool), c) for m, c in zip(sample.masks, sample.class_ids)]


def class_exemplars(dataset: ShapesDataset, shots: int = 1) -> dict[int, list[int]]:
    """First train scenes hosting each class, in index order; shots per class."""
    hosts: dict[int, list[int]] = {c: [] for c in range(len(dataset.vocab))}
    for idx in dataset.train_indices:
        for cid in set(dataset.samples[idx].class_ids):
            if len(hosts[cid]) < shots:
                hosts[cid].append(idx)
    return hosts


def visual_prompt_group(dataset: ShapesDataset, model: SegModel, shots: int = 1) -> PromptTokens:
    """Pooled tokens from the exemplar scenes of every class, one group.

    Each host image contributes one token per class, pooled over the union of
    its instances, mirroring how training episodes pool their exemplars.
    """
    hosts = class_exemplars(dataset, shots)
    examples = []
    for cid in sorted(hosts):
        for idx in hosts[cid]:
            sample = dataset.samples[idx]
            union = np.zeros(sample.image.shape[1:], dtype=bool)
            for m, c in zip(sample.masks, sample.class_ids):
                if c == cid:
                    union |= m
            if not union.any():
                continue
            image = torch.from_numpy(sample.image).to(model.dtype)
            examples.append((image, [torch.from_numpy(union)], [cid]))
    if not examples:
        raise ValidationError("no exemplar instances found in the training split")
    return build_fewshot_prompts(examples, model)


def text_prompt_group(dataset: ShapesDataset, model: SegModel, text_seed: int) -> PromptTokens:
    ids = list(range(len(dataset.vocab)))
    return encode_text_prompts(ids, dataset.vocab, text_seed, model.cfg.text_dim,
                               dtype=model.dtype)


def evaluate(model: SegModel, dataset: ShapesDataset, mode: str, *, text_seed: int = 11,
             score_threshold: float = 0.5, mask_threshold: float = 0.5,
             overlap_keep: float = 0.8, fewshot_shots: int = 3,
             max_images: int | None = None) -> MetricReport:
    """Run one prompt mode over the validation split and aggregate metrics."""
    if mode not in EVAL_MODES:
        raise ValidationError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    visual = None
    text = None
    if mode in ("visual", "fused"):
        visual = visual_prompt_group(dataset, model, shots=1)
    if mode == "fewshot":
        visual = visual_prompt_group(dataset, model, shots=fewshot_shots)
    if mode in ("text", "fused"):
        text = text_prompt_group(dataset, model, text_seed)
    sem = SemanticIoUAggregator(len(dataset.vocab))
    pan = PanopticAggregator()
    det = DetectionAggregator((0.5, 0.75))
    indices = dataset.val_indices[:max_images] if max_images else dataset.val_indices
    for idx in indices:
        sample = dataset.samples[idx]
        result = segment(model, sample.image, visual=visual, text=text,
                         score_threshold=score_threshold, mask_threshold=mask_threshold,
                         overlap_keep=overlap_keep)
        sem.add(result.semantic, semantic_gt(sample))
        pred_segments = [(result.panoptic_ids == seg.segment_id, seg.class_id)
                         for seg in result.panoptic_segments]
        pan.add(pred_segments, gt_segments(sample))
        det.add([(inst.mask, inst.class_id, inst.confidence) for inst in result.instances],
                gt_segments(sample))
    miou_value, per_class = sem.result()
    pq, sq, rq = pan.result()
    ap = det.result()
    report = MetricReport(scalars={
        "miou": miou_value, "pq": pq, "sq": sq, "rq": rq,
        "ap50": ap[0.5], "ap75": ap[0.75], "n_images": float(len(indices)),
    })
    report.per_class["iou"] = {dataset.vocab.names[c]: v for c, v in per_class.items()}
    return report


def evaluate_vos(model: SegModel, scene_spec: SceneSpec, *, n_videos: int = 5,
                 n_frames: int = 10, capacity: int = 8, score_threshold: float = 0.5,
                 mask_threshold: float = 0.5, collect_banks: bool = False):
    """Propagate synthetic clips; mean IoU over objects and frames after the first."""
    ious = []
    banks = []
    for v in range(n_videos):
        frames, tracks, class_ids = make_video(scene_spec, n_frames, seed=1000 + v)
        first_masks = [t[0] for t in tracks]
        bank = MemoryBank(capacity=capacity)
        results = propagate_video(model, frames, first_masks, class_ids,
                                  capacity=capacity, score_threshold=score_threshold,
                                  mask_threshold=mask_threshold, bank=bank)
        banks.append(bank)
        for t in range(1, n_frames):
            for obj, track in enumerate(tracks):
                pred = results[t].masks[obj]
                gt = track[t]
                inter = np.logical_and(pred, gt).sum()
                union = np.logical_or(pred, gt).sum()
                ious.append(inter / union if union else 0.0)
    report = MetricReport(scalars={"vos_miou": float(np.mean(ious)) if ious else 0.0,
                                   "n_videos": float(n_videos)})
    if collect_banks:
        return report, banks
    return report
