import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from promptseg.encoders import ClassVocabulary, EncoderSpec
from promptseg.model import SegDecoderConfig, SegModel
from promptseg.synthdata import SceneSpec, generate_dataset, load_dataset

TINY_POOL = [EncoderSpec("fine", 8, 12, 1), EncoderSpec("coarse", 16, 10, 2)]


def tiny_model(init_seed=0, dtype=torch.float32, decoder_blocks=2, num_queries=4,
               pool=None, prompt_index=0):
    pool = list(TINY_POOL) if pool is None else pool
    cfg = SegDecoderConfig(width=16, num_queries=num_queries, aligner_blocks=1,
                           decoder_blocks=decoder_blocks, num_heads=4, ffn_dim=32,
                           visual_dim=pool[prompt_index].out_dim, text_dim=12)
    return SegModel(cfg, pool, pool[prompt_index], init_seed=init_seed, dtype=dtype)


def rand_image(rng, size=32, dtype=torch.float32):
    return torch.from_numpy(rng.random((3, size, size), dtype=np.float32)).to(dtype)


@pytest.fixture(scope="session")
def shapes_vocab():
    return ClassVocabulary(("circle", "square", "triangle"))


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """A 60-image 64px dataset shared by sampler/inference/CLI tests."""
    spec = SceneSpec(image_size=64, n_instances=(1, 3),
                     shape_classes=("circle", "square", "triangle"),
                     background_noise=0.05, overlap_allowed=False, seed=0)
    root = tmp_path_factory.mktemp("shapes") / "small"
    generate_dataset(spec, 60, root)
    return root


@pytest.fixture(scope="session")
def small_ds(small_root):
    return load_dataset(small_root)
