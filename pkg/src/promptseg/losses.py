"""Set-prediction training objective.

Bipartite matching between queries and ground-truth instances, then
classification plus mask losses on the matched pairs. Two matching routes
exist on purpose: the scipy-backed solver used everywhere, and a brute-force
enumerator kept as an independent oracle for small problems.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .encoders import ShapeError, ValidationError
from .model import MaskLogits, ScoreMatrix


class CapacityError(ValidationError):
    """More ground-truth instances than queries; no full matching exists."""


class MatchSizeError(ValidationError):
    """Problem too large for exhaustive matching."""


@dataclass
class Assignment:
    """Matched (query, gt) pairs sorted by query, plus the leftover queries."""

    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]


@dataclass
class GroundTruthSet:
    """Targets for one episode: instance masks on the mask-logit grid.

    prompt_columns[g] is the score column whose prompt denotes instance g's
    class (or, for video, its object identity).
    """

    masks: torch.Tensor  # (G, H', W') float or bool
    class_ids: list[int]
    prompt_columns: list[int]

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise ShapeError(f"gt masks must be (G, H, W), got {tuple(self.masks.shape)}")
        g = self.masks.shape[0]
        if len(self.class_ids) != g or len(self.prompt_columns) != g:
            raise ValidationError(
                f"{g} masks but {len(self.class_ids)} class ids / "
                f"{len(self.prompt_columns)} prompt columns")

    def __len__(self) -> int:
        return self.masks.shape[0]


@dataclass
class LossWeights:
    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        for name in ("class_weight", "bce_weight", "dice_weight", "no_object_weight"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {v}")


def _check_cost(cost: np.ndarray) -> tuple[int, int]:
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-d, got shape {cost.shape}")
    k, g = cost.shape
    if g > k:
        raise CapacityError(f"{g} ground-truth instances exceed {k} queries")
    if cost.size and not np.isfinite(cost).all():
        raise ValidationError("cost matrix contains non-finite values")
    return k, g


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment of every gt column to a distinct query row.

    Among cost-equal optima, returns the one whose sorted pair list is
    lexicographically smallest in (query, gt). That canonical optimum is
    recovered by scanning candidate pairs in ascending order and keeping each
    pair that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    k, g = _check_cost(cost)
    if g == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(k)))
    rows, cols = linear_sum_assignment(cost)
    best_total = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best_total))

    pairs: list[tuple[int, int]] = []
    used_g: set[int] = set()
    forced = 0.0
    for q in range(k):
        if len(pairs) == g:
            break
        used_q = {p for p, _ in pairs}
        for j in range(g):
            if j in used_g:
                continue
            rem_q = [i for i in range(k) if i != q and i not in used_q]
            rem_g = [c for c in range(g) if c != j and c not in used_g]
            if rem_g:
                sub = cost[np.ix_(rem_q, rem_g)]
                sr, sc = linear_sum_assignment(sub)
                completion = float(sub[sr, sc].sum())
            else:
                completion = 0.0
            if abs(forced + cost[q, j] + completion - best_total) <= tol:
                pairs.append((q, j))
                used_g.add(j)
                forced += float(cost[q, j])
                break
    if len(pairs) != g:
        raise RuntimeError("tie-break refinement failed to reconstruct an optimal matching")
    matched_q = {q for q, _ in pairs}
    return Assignment(pairs=pairs, unmatched_queries=[i for i in range(k) if i not in matched_q])


def brute_force_match(cost) -> Assignment:
    """Exhaustive matching oracle for G <= 7; same tie-break as hungarian_match."""
    cost = np.asarray(cost, dtype=np.float64)
    k, g = _check_cost(cost)
    if g > 7:
        raise MatchSizeError(f"brute force limited to 7 instances, got {g}")
    if g == 0:
        return Assignment(pairs=[], unmatched_queries=list(range(k)))
    best_total = None
    best_pairs = None
    for perm in itertools.permutations(range(k), g):
        pairs = sorted(zip(perm, range(g)))
        total = float(sum(cost[q, j] for q, j in pairs))
        if best_total is None or total < best_total or (total == best_total and pairs < best_pairs):
            best_total, best_pairs = total, pairs
    matched_q = {q for q, _ in best_pairs}
    return Assignment(pairs=best_pairs,
                      unmatched_queries=[i for i in range(k) if i not in matched_q])


def dice_loss(pred_logits: torch.Tensor, gt_mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice between sigmoid(pred) and a binary target, smoothed by eps."""
    if pred_logits.shape != gt_mask.shape:
        raise ShapeError(
            f"mask shapes differ: {tuple(pred_logits.shape)} vs {tuple(gt_mask.shape)}")
    p = torch.sigmoid(pred_logits)
    t = gt_mask.to(p.dtype)
    num = 2.0 * (p * t).sum() + eps
    den = p.sum() + t.sum() + eps
    return 1.0 - num / den


def mask_bce_loss(pred_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross entropy on logits, averaged over the grid."""
    if pred_logits.shape != gt_mask.shape:
        raise ShapeError(
            f"mask shapes differ: {tuple(pred_logits.shape)} vs {tuple(gt_mask.shape)}")
    return F.binary_cross_entropy_with_logits(pred_logits, gt_mask.to(pred_logits.dtype))


def classification_loss(scores: ScoreMatrix, assignment: Assignment, gt: GroundTruthSet,
                        no_object_weight: float = 0.1) -> torch.Tensor:
    """Cross entropy over score columns; unmatched queries target no-object.

    Matched rows carry weight 1, no-object rows weight no_object_weight; the
    weighted sum is divided by the query count.
    """
    logits = scores.logits
    k = logits.shape[0]
    targets = torch.full((k,), scores.no_object_column, dtype=torch.long)
    weights = torch.full((k,), no_object_weight, dtype=logits.dtype)
    for q, g in assignment.pairs:
        col = gt.prompt_columns[g]
        if not 0 <= col < scores.no_object_column:
            raise ValidationError(
                f"prompt column {col} outside {scores.no_object_column} prompt columns")
        targets[q] = col
        weights[q] = 1.0
    logp = F.log_softmax(logits, dim=1)
    picked = logp[torch.arange(k), targets]
    return -(weights * picked).sum() / k


def pairwise_mask_costs(mask_logits: torch.Tensor,
                        gt_masks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(K, G) BCE and Dice tables between every query mask and every gt mask."""
    k = mask_logits.shape[0]
    g = gt_masks.shape[0]
    if mask_logits.shape[1:] != gt_masks.shape[1:]:
        raise ShapeError(
            f"mask grids differ: {tuple(mask_logits.shape)} vs {tuple(gt_masks.shape)}")
    n = int(np.prod(mask_logits.shape[1:]))
    x = mask_logits.reshape(k, n)
    t = gt_masks.reshape(g, n).to(x.dtype)
    # bce(x, t) = softplus(x) - x * t, averaged over pixels
    pos = F.softplus(x).sum(dim=1)
    bce = (pos[:, None] - x @ t.t()) / n
    p = torch.sigmoid(x)
    inter = p @ t.t()
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(dim=1)[:, None] + t.sum(dim=1)[None, :] + 1.0)
    return bce, dice


def matching_costs(scores: ScoreMatrix, mask_logits: MaskLogits, gt: GroundTruthSet,
                   weights: LossWeights) -> np.ndarray:
    """(K, G) assignment cost table mirroring the training loss terms."""
    with torch.no_grad():
        logp = F.log_softmax(scores.logits, dim=1)
        cols = torch.as_tensor(gt.prompt_columns, dtype=torch.long)
        cls_cost = -logp[:, cols] if len(gt) else logp.new_zeros((logp.shape[0], 0))
        bce, dice = pairwise_mask_costs(mask_logits.logits, gt.masks)
        cost = (weights.class_weight * cls_cost + weights.bce_weight * bce
                + weights.dice_weight * dice)
    return cost.to(torch.float64).cpu().numpy()


def _single_output_loss(scores: ScoreMatrix, mask_logits: MaskLogits, gt: GroundTruthSet,
                        weights: LossWeights) -> tuple[torch.Tensor, Assignment]:
    assignment = hungarian_match(matching_costs(scores, mask_logits, gt, weights))
    loss = weights.class_weight * classification_loss(scores, assignment, gt,
                                                      weights.no_object_weight)
    if len(gt):
        bce = sum(mask_bce_loss(mask_logits.logits[q], gt.masks[g]) for q, g in assignment.pairs)
        dice = sum(dice_loss(mask_logits.logits[q], gt.masks[g]) for q, g in assignment.pairs)
        loss = loss + (weights.bce_weight * bce + weights.dice_weight * dice) / len(gt)
    return loss, assignment


def total_loss(scores: ScoreMatrix, mask_logits: MaskLogits,
               aux_outputs: list[tuple[ScoreMatrix, MaskLogits]], gt: GroundTruthSet,
               weights: LossWeights) -> tuple[torch.Tensor, Assignment]:
    """Deep-supervised episode loss: every block output is matched and scored.

    Returns the mean over block losses and the final output's assignment.
    """
    losses = []
    for s, m in aux_outputs:
        aux_loss, _ = _single_output_loss(s, m, gt, weights)
        losses.append(aux_loss)
    final_loss, assignment = _single_output_loss(scores, mask_logits, gt, weights)
    losses.append(final_loss)
    return torch.stack(losses).mean(), assignment
