"""Promptable open-world segmentation on frozen stub-encoder features."""

from .encoders import (
    ClassVocabulary,
    EncoderSpec,
    ImageFeatureSet,
    PromptTokens,
    encode_image,
    encode_text_prompts,
    encode_visual_prompts,
    encoder_checksum,
)
from .inference import MemoryBank, SegmentationResult, fuse_prompts, propagate_video, segment
from .losses import Assignment, GroundTruthSet, LossWeights, brute_force_match, \
    hungarian_match, total_loss
from .model import ForwardOutput, ScoreMatrix, SegDecoderConfig, SegModel
from .synthdata import SceneSpec, ShapesDataset, generate_dataset, load_dataset, make_video
from .training import TrainConfig, fit, load_checkpoint, lr_at_step, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "ClassVocabulary",
    "EncoderSpec",
    "ForwardOutput",
    "GroundTruthSet",
    "ImageFeatureSet",
    "LossWeights",
    "MemoryBank",
    "PromptTokens",
    "SceneSpec",
    "ScoreMatrix",
    "SegDecoderConfig",
    "SegModel",
    "SegmentationResult",
    "ShapesDataset",
    "TrainConfig",
    "brute_force_match",
    "encode_image",
    "encode_text_prompts",
    "encode_visual_prompts",
    "encoder_checksum",
    "fit",
    "fuse_prompts",
    "generate_dataset",
    "hungarian_match",
    "load_checkpoint",
    "load_dataset",
    "lr_at_step",
    "make_video",
    "propagate_video",
    "save_checkpoint",
    "segment",
    "total_loss",
]
