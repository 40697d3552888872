"""Frozen encoder pool.

Stub encoders stand in for large pretrained backbones: each one flattens
non-overlapping patches and applies a fixed random linear projection whose
weights are derived from a seed. They hold no trainable state, so the
feature extractor is frozen by construction and gradients never reach it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

VISUAL = "visual"
TEXT = "text"
FUSED = "fused"

_MODALITIES = (VISUAL, TEXT, FUSED)


class ValidationError(ValueError):
    """Bad argument values (non-finite inputs, mismatched lengths, ...)."""


class ShapeError(ValueError):
    """Tensor shape violates a documented contract."""


class EmptyMaskError(ValidationError):
    """A visual prompt mask contains no foreground pixels."""


class VocabularyError(ValidationError):
    """A class id falls outside the vocabulary."""


def derive_seed(*parts) -> int:
    """Collapse a tuple of identifying parts into a stable 64-bit seed.

    Uses blake2b rather than hash() so the value survives across processes
    and interpreter restarts.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class EncoderSpec:
    """Identity of one stub encoder: patch stride, output width, seed."""

    name: str
    stride: int
    out_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValidationError(f"encoder stride must be >= 1, got {self.stride}")
        if self.out_dim < 1:
            raise ValidationError(f"encoder out_dim must be >= 1, got {self.out_dim}")


@dataclass
class ImageFeatureSet:
    """Per-encoder feature grids resampled onto the finest stride's grid."""

    features: list[torch.Tensor]  # each (out_dim_i, H, W), same H and W
    strides: list[int]            # native stride of each encoder, pre-resample
    grid_size: tuple[int, int]    # (H, W) of the shared grid

    @property
    def out_dims(self) -> list[int]:
        return [f.shape[0] for f in self.features]


@dataclass
class PromptTokens:
    """A group of prompt tokens with per-row class metadata.

    embeddings: (rows, dim) tensor. instance_ids is optional and only
    meaningful for visual prompts that track specific objects (video).
    """

    embeddings: torch.Tensor
    class_ids: list[int]
    modality: str
    instance_ids: list[int] | None = None

    def __post_init__(self):
        if self.modality not in _MODALITIES:
            raise ValidationError(f"unknown prompt modality {self.modality!r}")
        if self.embeddings.ndim != 2:
            raise ShapeError(f"prompt embeddings must be 2-d, got {tuple(self.embeddings.shape)}")
        if self.embeddings.shape[0] != len(self.class_ids):
            raise ValidationError(
                f"{self.embeddings.shape[0]} embedding rows but {len(self.class_ids)} class ids")
        if self.instance_ids is not None and len(self.instance_ids) != len(self.class_ids):
            raise ValidationError("instance_ids length must match class_ids")
        if self.embeddings.numel() and not torch.isfinite(self.embeddings).all():
            raise ValidationError("prompt embeddings contain non-finite values")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class ClassVocabulary:
    """Ordered class names; index in the list is the class id."""

    names: list[str]
    stuff_flags: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("vocabulary names must be unique")
        if not self.stuff_flags:
            self.stuff_flags = [False] * len(self.names)
        if len(self.stuff_flags) != len(self.names):
            raise ValidationError("stuff_flags length must match names")

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown class name {name!r}") from None

    def check_id(self, class_id: int):
        if not 0 <= class_id < len(self.names):
            raise VocabularyError(
                f"class id {class_id} outside vocabulary of size {len(self.names)}")


def projection_weights(spec: EncoderSpec, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed random projection (3*stride^2, out_dim) for a stub encoder.

    Generated in float64 from a seed derived off the spec identity, then cast,
    so every dtype sees the same underlying values.
    """
    gen = torch.Generator()
    gen.manual_seed(derive_seed("stub-projection", spec.name, spec.stride, spec.out_dim, spec.seed))
    fan_in = 3 * spec.stride * spec.stride
    w = torch.randn(fan_in, spec.out_dim, generator=gen, dtype=torch.float64)
    w = w / fan_in ** 0.5
    return w.to(dtype)


def _check_image(image: torch.Tensor):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected image of shape (3, H, W), got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValidationError("image contains non-finite values")


def encode_single(image: torch.Tensor, spec: EncoderSpec) -> torch.Tensor:
    """Run one stub encoder on its native grid: (out_dim, H/stride, W/stride)."""
    _check_image(image)
    s = spec.stride
    _, h, w = image.shape
    if h % s or w % s:
        raise ShapeError(f"image size {h}x{w} not divisible by stride {s}")
    patches = image.unfold(1, s, s).unfold(2, s, s)          # (3, h/s, w/s, s, s)
    patches = patches.permute(1, 2, 0, 3, 4).reshape(-1, 3 * s * s)
    feats = patches @ projection_weights(spec, image.dtype)
    return feats.t().reshape(spec.out_dim, h // s, w // s)


def encode_image(image: torch.Tensor, pool: list[EncoderSpec]) -> ImageFeatureSet:
    """Encode with every pool member and resample all grids to the finest stride."""
    if not pool:
        raise ValidationError("encoder pool is empty")
    _check_image(image)
    fine = min(spec.stride for spec in pool)
    _, h, w = image.shape
    for spec in pool:
        if h % spec.stride or w % spec.stride:
            raise ShapeError(
                f"image size {h}x{w} not divisible by stride {spec.stride} of {spec.name!r}")
    target = (h // fine, w // fine)
    grids = []
    with torch.no_grad():
        for spec in pool:
            g = encode_single(image, spec)
            if g.shape[1:] != target:
                g = F.interpolate(g[None], size=target, mode="bilinear", align_corners=False)[0]
            grids.append(g)
    return ImageFeatureSet(features=grids, strides=[s.stride for s in pool], grid_size=target)


def pool_mask_tokens(features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Average feature cells selected by each downsampled mask.

    features: (d, h, w) grid. masks: (n, h, w) boolean selection per prompt,
    already on the feature grid. Returns (n, d) token rows.
    """
    if features.ndim != 3:
        raise ShapeError(f"features must be (d, h, w), got {tuple(features.shape)}")
    if masks.ndim != 3 or masks.shape[1:] != features.shape[1:]:
        raise ShapeError(
            f"masks {tuple(masks.shape)} do not lie on feature grid {tuple(features.shape)}")
    flat = features.reshape(features.shape[0], -1)
    rows = []
    for m in masks.reshape(masks.shape[0], -1):
        sel = m.bool()
        if not sel.any():
            raise EmptyMaskError("mask selects no feature cells")
        rows.append(flat[:, sel].mean(dim=1))
    return torch.stack(rows) if rows else features.new_zeros((0, features.shape[0]))


def downsample_mask(mask: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Area-average a full-resolution mask onto a feature grid, threshold 0.5.

    Falls back to the single strongest cell when nothing clears the threshold,
    so thin structures still produce a token.
    """
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got {tuple(mask.shape)}")
    frac = F.interpolate(mask[None, None].to(torch.float64), size=grid, mode="area")[0, 0]
    sel = frac >= 0.5
    if not sel.any():
        if frac.max() <= 0:
            raise EmptyMaskError("mask has no foreground pixels")
        sel = torch.zeros_like(sel)
        sel.view(-1)[frac.argmax()] = True
    return sel


def encode_visual_prompts(
    image: torch.Tensor,
    masks: list[torch.Tensor],
    class_ids: list[int],
    encoder: EncoderSpec,
    instance_ids: list[int] | None = None,
) -> PromptTokens:
    """Pool one token per (mask, class) pair from the prompt encoder's grid."""
    if len(masks) != len(class_ids):
        raise ValidationError(f"{len(masks)} masks but {len(class_ids)} class ids")
    if instance_ids is not None and len(instance_ids) != len(masks):
        raise ValidationError("instance_ids length must match masks")
    feats = encode_single(image, encoder).detach()
    grid = feats.shape[1:]
    if masks:
        for m in masks:
            if m.to(torch.float64).sum() <= 0:
                raise EmptyMaskError("visual prompt mask has no foreground pixels")
        sel = torch.stack([downsample_mask(torch.as_tensor(m, dtype=torch.float64), grid)
                           for m in masks])
        rows = pool_mask_tokens(feats, sel)
    else:
        rows = feats.new_zeros((0, feats.shape[0]))
    return PromptTokens(embeddings=rows, class_ids=list(class_ids), modality=VISUAL,
                        instance_ids=list(instance_ids) if instance_ids is not None else None)


def text_embedding_row(name: str, seed: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Deterministic embedding for one class name, keyed by the name string."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed("text-embedding", name, seed, dim))
    row = torch.randn(dim, generator=gen, dtype=torch.float64) / dim ** 0.5
    return row.to(dtype)


def encode_text_prompts(
    class_ids: list[int],
    vocab: ClassVocabulary,
    seed: int,
    dim: int,
    dtype: torch.dtype = torch.float32,
) -> PromptTokens:
    """Look up one seeded embedding row per requested class id."""
    for cid in class_ids:
        vocab.check_id(cid)
    if class_ids:
        rows = torch.stack([text_embedding_row(vocab.names[c], seed, dim, dtype) for c in class_ids])
    else:
        rows = torch.zeros((0, dim), dtype=dtype)
    return PromptTokens(embeddings=rows, class_ids=list(class_ids), modality=TEXT)


def encoder_checksum(pool: list[EncoderSpec], dtype: torch.dtype = torch.float32) -> str:
    """sha256 over every pool member's projection bytes; pins the frozen contract."""
    h = hashlib.sha256()
    for spec in pool:
        h.update(f"{spec.name}:{spec.stride}:{spec.out_dim}:{spec.seed}".encode())
        h.update(projection_weights(spec, dtype).numpy().tobytes())
    return h.hexdigest()
