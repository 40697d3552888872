"""Prompt-conditioned set-prediction decoder over frozen features.

One trainable stack serves every prompt modality: blended pool features and
adapted prompt tokens pass through an image-prompt aligner, a pixel decoder
for the high-resolution mask feature, and a multi-modality transformer
decoder whose refined queries are scored against refined prompt tokens by
cosine similarity and turned into mask logit grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import (
    FUSED,
    TEXT,
    VISUAL,
    EncoderSpec,
    ImageFeatureSet,
    PromptTokens,
    ShapeError,
    ValidationError,
    derive_seed,
    encode_image,
)


@dataclass
class SegDecoderConfig:
    width: int = 64                 # shared embedding width
    num_queries: int = 20
    aligner_blocks: int = 1
    decoder_blocks: int = 6
    num_heads: int = 8
    ffn_dim: int = 256
    mask_mlp_depth: int = 3
    visual_dim: int = 64            # raw visual prompt token width
    text_dim: int = 64

    def __post_init__(self):
        if self.width % self.num_heads:
            raise ValidationError(
                f"width {self.width} not divisible by num_heads {self.num_heads}")
        if self.width % 4:
            raise ValidationError("width must be divisible by 4 for 2-d position encodings")
        if min(self.num_queries, self.aligner_blocks, self.decoder_blocks,
               self.ffn_dim, self.mask_mlp_depth) < 1:
            raise ValidationError("block counts, query count and ffn width must be >= 1")


@dataclass
class BlendedFeature:
    grid: torch.Tensor  # (C, H, W)


@dataclass
class MaskFeature:
    grid: torch.Tensor  # (C, 4H, 4W)


@dataclass
class AlignedState:
    image: torch.Tensor   # (C, H, W)
    visual: torch.Tensor  # (M, C)
    text: torch.Tensor    # (N, C)


@dataclass
class DecodedState:
    queries: torch.Tensor  # (K, C)
    visual: torch.Tensor   # (M, C)
    text: torch.Tensor     # (N, C)


@dataclass
class ScoreMatrix:
    """(K, P+1) logits; last column is the learned no-object score."""

    logits: torch.Tensor
    column_class_ids: list[int]
    column_instance_ids: list[int | None] | None = None

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ShapeError(f"score logits must be 2-d, got {tuple(self.logits.shape)}")
        if self.logits.shape[1] != len(self.column_class_ids) + 1:
            raise ShapeError(
                f"{self.logits.shape[1]} columns for {len(self.column_class_ids)} prompts; "
                "expected one extra no-object column")

    @property
    def no_object_column(self) -> int:
        return self.logits.shape[1] - 1


@dataclass
class MaskLogits:
    logits: torch.Tensor  # (K, H', W')


@dataclass
class ForwardOutput:
    scores: ScoreMatrix
    mask_logits: MaskLogits
    block_outputs: list[tuple[ScoreMatrix, MaskLogits]]
    decoded: DecodedState
    mask_feature: MaskFeature
    aligned: AlignedState

    @property
    def aux(self) -> list[tuple[ScoreMatrix, MaskLogits]]:
        return self.block_outputs[:-1]


@lru_cache(maxsize=32)
def _position_encoding_cached(height: int, width: int, dim: int, dtype_name: str) -> torch.Tensor:
    dtype = getattr(torch, dtype_name)
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(height, dtype=torch.float64)
    xs = torch.arange(width, dtype=torch.float64)
    y = (ys[:, None] * omega[None, :])[:, None, :].expand(height, width, quarter)
    x = (xs[:, None] * omega[None, :])[None, :, :].expand(height, width, quarter)
    pe = torch.cat([y.sin(), y.cos(), x.sin(), x.cos()], dim=-1).reshape(height * width, dim)
    return pe.to(dtype)


def position_encoding(height: int, width: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed 2-d sine/cosine encoding, one row per grid cell, row-major."""
    if dim % 4:
        raise ShapeError(f"position encoding dim must be divisible by 4, got {dim}")
    return _position_encoding_cached(height, width, dim, str(dtype).split(".")[-1]).clone()


class FeatureBlender(nn.Module):
    """Two 3x3 convs squeezing the concatenated pool channels into width C."""

    def __init__(self, in_dims: list[int], width: int):
        super().__init__()
        self.in_dims = list(in_dims)
        self.conv1 = nn.Conv2d(sum(in_dims), width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, feats: ImageFeatureSet) -> BlendedFeature:
        if feats.out_dims != self.in_dims:
            raise ShapeError(
                f"pool channel dims {feats.out_dims} do not match blender dims {self.in_dims}")
        x = torch.cat(list(feats.features), dim=0)[None]
        x = self.conv2(F.relu(self.conv1(x)))
        return BlendedFeature(grid=x[0])


class PromptAdapter(nn.Module):
    """Linear projection + LayerNorm lifting raw prompt tokens to width C."""

    def __init__(self, in_dim: int, width: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.ndim != 2 or rows.shape[1] != self.proj.in_features:
            raise ShapeError(
                f"adapter expects (n, {self.proj.in_features}), got {tuple(rows.shape)}")
        if rows.shape[0] == 0:
            return rows.new_zeros((0, self.proj.out_features))
        return self.norm(self.proj(rows))


def _ffn(width: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, width))


class AlignerBlock(nn.Module):
    """Self-attention over [image; prompts], prompt-to-image cross-attention, FFN.

    Pre-norm residual layout; positional encodings enter only through image
    token queries/keys so prompt rows stay permutation equivariant.
    """

    def __init__(self, width: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(width)
        self.ffn = _ffn(width, ffn_dim)

    def forward(self, seq: torch.Tensor, n_image: int, pos: torch.Tensor) -> torch.Tensor:
        y = self.norm_self(seq)
        qk = y + pos
        attn, _ = self.self_attn(qk, qk, y, need_weights=False)
        seq = seq + attn
        if seq.shape[1] > n_image:
            y = self.norm_cross(seq)
            img, prompts = y[:, :n_image], y[:, n_image:]
            attn, _ = self.cross_attn(prompts, img + pos[:, :n_image], img, need_weights=False)
            seq = torch.cat([seq[:, :n_image], seq[:, n_image:] + attn], dim=1)
        y = self.norm_ffn(seq)
        return seq + self.ffn(y)


class ImagePromptAligner(nn.Module):
    """Joint refinement of image tokens and prompt tokens before decoding."""

    def __init__(self, width: int, heads: int, ffn_dim: int, blocks: int):
        super().__init__()
        self.width = width
        self.blocks = nn.ModuleList(AlignerBlock(width, heads, ffn_dim) for _ in range(blocks))

    def forward(self, blended: BlendedFeature, visual: torch.Tensor,
                text: torch.Tensor) -> AlignedState:
        c, h, w = blended.grid.shape
        for name, rows in (("visual", visual), ("text", text)):
            if rows.ndim != 2 or (rows.shape[0] and rows.shape[1] != c):
                raise ShapeError(f"{name} tokens must be (n, {c}), got {tuple(rows.shape)}")
        img = blended.grid.reshape(c, h * w).t()
        seq = torch.cat([img, visual, text], dim=0)[None]
        pos_img = position_encoding(h, w, c, blended.grid.dtype)
        pos = torch.cat([pos_img, pos_img.new_zeros((seq.shape[1] - h * w, c))], dim=0)[None]
        for block in self.blocks:
            seq = block(seq, h * w, pos)
        out = seq[0]
        m = visual.shape[0]
        return AlignedState(
            image=out[:h * w].t().reshape(c, h, w),
            visual=out[h * w:h * w + m],
            text=out[h * w + m:],
        )


class PixelDecoder(nn.Module):
    """Two stride-2 transpose convs lifting the blended grid 4x for mask logits."""

    def __init__(self, width: int):
        super().__init__()
        groups = 8 if width % 8 == 0 else 1
        self.up1 = nn.ConvTranspose2d(width, width, 2, stride=2)
        self.norm = nn.GroupNorm(groups, width)
        self.up2 = nn.ConvTranspose2d(width, width, 2, stride=2)

    def forward(self, blended: BlendedFeature) -> MaskFeature:
        x = F.relu(self.norm(self.up1(blended.grid[None])))
        return MaskFeature(grid=self.up2(x)[0])


class DecoderBlock(nn.Module):
    """Cross-attention of [queries; prompts] into image tokens, then self-attention, FFN."""

    def __init__(self, width: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(width)
        self.ffn = _ffn(width, ffn_dim)

    def forward(self, seq: torch.Tensor, image: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        y = self.norm_cross(seq)
        attn, _ = self.cross_attn(y, image + pos, image, need_weights=False)
        seq = seq + attn
        y = self.norm_self(seq)
        attn, _ = self.self_attn(y, y, y, need_weights=False)
        seq = seq + attn
        y = self.norm_ffn(seq)
        return seq + self.ffn(y)


class MultiModalityDecoder(nn.Module):
    """Stack of decoder blocks; emits a normalized read-out after every block."""

    def __init__(self, width: int, heads: int, ffn_dim: int, blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(width, heads, ffn_dim) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(width)

    def forward(self, queries: torch.Tensor, aligned: AlignedState,
                mask_feature: MaskFeature) -> list[DecodedState]:
        del mask_feature  # consumed by the mask head, carried through unchanged
        c, h, w = aligned.image.shape
        if queries.shape[1] != c:
            raise ShapeError(f"queries must be (K, {c}), got {tuple(queries.shape)}")
        image = aligned.image.reshape(c, h * w).t()[None]
        pos = position_encoding(h, w, c, image.dtype)[None]
        k, m = queries.shape[0], aligned.visual.shape[0]
        seq = torch.cat([queries, aligned.visual, aligned.text], dim=0)[None]
        states = []
        for block in self.blocks:
            seq = block(seq, image, pos)
            out = self.out_norm(seq[0])
            states.append(DecodedState(queries=out[:k], visual=out[k:k + m], text=out[k + m:]))
        return states


class ScoreHead(nn.Module):
    """Cosine scores between refined queries and prompt rows plus a no-object column."""

    def __init__(self, width: int):
        super().__init__()
        self.no_object = nn.Parameter(torch.randn(width) * 0.02)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(10.0)))

    def forward(self, decoded: DecodedState, column_class_ids: list[int],
                column_instance_ids: list[int | None] | None = None) -> ScoreMatrix:
        cols = torch.cat([decoded.visual, decoded.text, self.no_object[None]], dim=0)
        q = F.normalize(decoded.queries, dim=-1)
        p = F.normalize(cols, dim=-1)
        logits = torch.exp(self.log_temperature) * (q @ p.t())
        return ScoreMatrix(logits=logits, column_class_ids=list(column_class_ids),
                           column_instance_ids=column_instance_ids)


class MaskHead(nn.Module):
    """MLP per query, then inner product with the mask feature at every cell."""

    def __init__(self, width: int, depth: int):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(width, width))
            if i + 1 < depth:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)

    def forward(self, queries: torch.Tensor, mask_feature: MaskFeature) -> MaskLogits:
        kernels = self.mlp(queries)
        return MaskLogits(logits=torch.einsum("kc,chw->khw", kernels, mask_feature.grid))


class SegModel(nn.Module):
    """Frozen pool specs plus every trainable piece, end to end.

    parameters() covers only the decoder stack; encoders are regenerated from
    their specs on demand and sit behind no_grad, so nothing upstream trains.
    """

    def __init__(self, cfg: SegDecoderConfig, pool: list[EncoderSpec],
                 prompt_encoder: EncoderSpec, init_seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if not pool:
            raise ValidationError("encoder pool is empty")
        if prompt_encoder.out_dim != cfg.visual_dim:
            raise ValidationError(
                f"prompt encoder out_dim {prompt_encoder.out_dim} != visual_dim {cfg.visual_dim}")
        self.cfg = cfg
        self.pool = list(pool)
        self.prompt_encoder = prompt_encoder
        self.dtype = dtype
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed("segmodel-init", init_seed))
            self.blender = FeatureBlender([s.out_dim for s in pool], cfg.width)
            self.visual_adapter = PromptAdapter(cfg.visual_dim, cfg.width)
            self.text_adapter = PromptAdapter(cfg.text_dim, cfg.width)
            self.aligner = ImagePromptAligner(cfg.width, cfg.num_heads, cfg.ffn_dim,
                                              cfg.aligner_blocks)
            self.pixel_decoder = PixelDecoder(cfg.width)
            self.decoder = MultiModalityDecoder(cfg.width, cfg.num_heads, cfg.ffn_dim,
                                                cfg.decoder_blocks)
            self.score_head = ScoreHead(cfg.width)
            self.mask_head = MaskHead(cfg.width, cfg.mask_mlp_depth)
            self.query_embed = nn.Parameter(torch.randn(cfg.num_queries, cfg.width) * 0.02)
        self.to(dtype)

    def encode(self, image: torch.Tensor) -> ImageFeatureSet:
        return encode_image(image.to(self.dtype), self.pool)

    def adapt_tokens(self, tokens: PromptTokens) -> PromptTokens:
        """Lift one raw prompt group to width C; fused groups pass through."""
        rows = tokens.embeddings.to(self.dtype)
        if tokens.modality == VISUAL:
            rows = self.visual_adapter(rows)
        elif tokens.modality == TEXT:
            rows = self.text_adapter(rows)
        elif rows.shape[0] and rows.shape[1] != self.cfg.width:
            raise ShapeError(
                f"fused tokens must already have width {self.cfg.width}, got {rows.shape[1]}")
        return PromptTokens(embeddings=rows, class_ids=list(tokens.class_ids),
                            modality=tokens.modality,
                            instance_ids=list(tokens.instance_ids)
                            if tokens.instance_ids is not None else None)

    def forward(self, image: torch.Tensor | ImageFeatureSet,
                prompts: list[PromptTokens]) -> ForwardOutput:
        feats = self.encode(image) if isinstance(image, torch.Tensor) else image
        blended = self.blender(feats)
        visual_groups = [g for g in prompts if g.modality in (VISUAL, FUSED)]
        text_groups = [g for g in prompts if g.modality == TEXT]
        width = self.cfg.width

        def rows_of(groups):
            adapted = [self.adapt_tokens(g) for g in groups]
            parts = [a.embeddings for a in adapted if len(a)]
            rows = torch.cat(parts, dim=0) if parts else blended.grid.new_zeros((0, width))
            cids = [c for g in groups for c in g.class_ids]
            iids = [i for g in groups
                    for i in (g.instance_ids if g.instance_ids is not None
                              else [None] * len(g))]
            return rows, cids, iids

        v_rows, v_cids, v_iids = rows_of(visual_groups)
        t_rows, t_cids, t_iids = rows_of(text_groups)
        column_class_ids = v_cids + t_cids
        column_instance_ids = v_iids + t_iids
        if all(i is None for i in column_instance_ids):
            column_instance_ids = None

        aligned = self.aligner(blended, v_rows, t_rows)
        mask_feature = self.pixel_decoder(blended)
        states = self.decoder(self.query_embed, aligned, mask_feature)
        block_outputs = [
            (self.score_head(st, column_class_ids, column_instance_ids),
             self.mask_head(st.queries, mask_feature))
            for st in states
        ]
        scores, mask_logits = block_outputs[-1]
        return ForwardOutput(scores=scores, mask_logits=mask_logits,
                             block_outputs=block_outputs, decoded=states[-1],
                             mask_feature=mask_feature, aligned=aligned)
