import numpy as np
import pytest
import torch

from promptseg.encoders import (EncoderSpec, PromptTokens, ShapeError,
                                encode_image)
from promptseg.model import (BlendedFeature, DecodedState, FeatureBlender,
                             MaskFeature, MaskHead, PixelDecoder, PromptAdapter,
                             ScoreHead, SegDecoderConfig, SegModel,
                             position_encoding)

from conftest import TINY_POOL, rand_image, tiny_model


def rand_prompts(rng, m, n, dtype=torch.float32):
    groups = []
    if m:
        emb = torch.from_numpy(rng.normal(size=(m, 12)).astype(np.float32)).to(dtype)
        groups.append(PromptTokens(emb, list(range(m)), "visual"))
    if n:
        emb = torch.from_numpy(rng.normal(size=(n, 12)).astype(np.float32)).to(dtype)
        groups.append(PromptTokens(emb, list(range(n)), "text"))
    return groups


def test_config_validation():
    with pytest.raises(Exception):
        SegDecoderConfig(width=30, num_heads=4)  # not divisible by heads
    with pytest.raises(Exception):
        SegDecoderConfig(width=18, num_heads=2)  # sincos needs width % 4 == 0
    SegDecoderConfig(width=32, num_heads=4)


def test_position_encoding_basics():
    pe = position_encoding(3, 5, 16, torch.float32)
    assert pe.shape == (15, 16)
    # distinct cells get distinct encodings
    assert len({tuple(np.round(r, 6)) for r in pe.numpy()}) == 15
    again = position_encoding(3, 5, 16, torch.float32)
    assert torch.equal(pe, again)
    again.mul_(0)  # cached copy must not be aliased
    assert torch.equal(pe, position_encoding(3, 5, 16, torch.float32))


def test_score_and_mask_shapes_over_random_sizes():
    rng = np.random.default_rng(0)
    model = tiny_model()
    img = rand_image(rng, 32)  # finest stride 8 -> 4x4 grid, masks 16x16
    for m, n in [(0, 0), (1, 0), (0, 2), (3, 2), (5, 5)]:
        out = model(img, rand_prompts(rng, m, n))
        assert out.scores.logits.shape == (4, m + n + 1)
        assert out.mask_logits.logits.shape == (4, 16, 16)
        assert len(out.scores.column_class_ids) == m + n
        assert len(out.block_outputs) == model.cfg.decoder_blocks
        assert len(out.aux) == model.cfg.decoder_blocks - 1


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(5)
    model = tiny_model(dtype=torch.float64)
    img = rand_image(rng, 32, torch.float64)
    prompts = rand_prompts(rng, 2, 2, torch.float64)
    a = model(img, prompts)
    b = model(img, prompts)
    assert torch.equal(a.scores.logits, b.scores.logits)
    assert torch.equal(a.mask_logits.logits, b.mask_logits.logits)


def test_same_seed_same_init():
    a = tiny_model(init_seed=9)
    b = tiny_model(init_seed=9)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = tiny_model(init_seed=10)
    assert any(not torch.equal(p, q) for (_, p), (_, q)
               in zip(a.named_parameters(), c.named_parameters()))


def test_prompt_permutation_equivariance():
    rng = np.random.default_rng(11)
    model = tiny_model(dtype=torch.float64)
    img = rand_image(rng, 32, torch.float64)
    emb = torch.from_numpy(rng.normal(size=(4, 12))).to(torch.float64)
    base = PromptTokens(emb, [0, 1, 2, 0], "visual")
    perm = [3, 1, 0, 2]
    shuf = PromptTokens(emb[perm], [base.class_ids[p] for p in perm], "visual")
    out_a = model(img, [base])
    out_b = model(img, [shuf])
    # visual columns permute, no-object column and masks stay put
    assert torch.allclose(out_a.scores.logits[:, perm], out_b.scores.logits[:, :4],
                          atol=1e-12)
    assert torch.allclose(out_a.scores.logits[:, -1], out_b.scores.logits[:, -1],
                          atol=1e-12)
    assert torch.allclose(out_a.mask_logits.logits, out_b.mask_logits.logits,
                          atol=1e-12)
    assert out_b.scores.column_class_ids == [base.class_ids[p] for p in perm]


def test_duplicate_prompt_rows_identical():
    rng = np.random.default_rng(13)
    model = tiny_model(dtype=torch.float64)
    img = rand_image(rng, 32, torch.float64)
    row = torch.from_numpy(rng.normal(size=(1, 12))).to(torch.float64)
    dup = PromptTokens(torch.cat([row, row]), [0, 0], "visual")
    out = model(img, [dup])
    assert torch.allclose(out.scores.logits[:, 0], out.scores.logits[:, 1], atol=1e-12)
    assert torch.allclose(out.decoded.visual[0], out.decoded.visual[1], atol=1e-12)


def test_column_order_groups_visual_then_text():
    rng = np.random.default_rng(3)
    model = tiny_model()
    img = rand_image(rng, 32)
    vis = PromptTokens(torch.randn(2, 12), [5, 6], "visual")
    txt = PromptTokens(torch.randn(3, 12), [7, 8, 9], "text")
    out = model(img, [txt, vis])  # text listed first must still come second
    assert out.scores.column_class_ids == [5, 6, 7, 8, 9]


def test_no_prompt_forward_scores_no_object_only():
    rng = np.random.default_rng(4)
    model = tiny_model()
    out = model(rand_image(rng, 32), [])
    assert out.scores.logits.shape == (4, 1)
    assert out.scores.column_class_ids == []


def test_feature_blender_channel_arithmetic():
    blender = FeatureBlender((16, 16), 64)
    assert blender.conv1.weight.shape[:2] == (64, 32)
    assert blender.conv2.weight.shape[:2] == (64, 64)
    with torch.no_grad():
        blender.conv1.bias.zero_()
        blender.conv2.bias.zero_()
        feats = encode_image(torch.zeros(3, 64, 64),
                             [EncoderSpec("a", 8, 16, 1), EncoderSpec("b", 8, 16, 2)])
        out = blender(feats)
    assert out.grid.shape == (64, 8, 8)
    assert out.grid.abs().max().item() == 0.0


def test_feature_blender_rejects_wrong_dims():
    blender = FeatureBlender((16,), 32)
    feats = encode_image(torch.zeros(3, 64, 64), [EncoderSpec("a", 8, 12, 1)])
    with pytest.raises(ShapeError):
        blender(feats)


def test_prompt_adapter_empty_and_shape():
    ad = PromptAdapter(12, 16)
    assert ad(torch.zeros(0, 12)).shape == (0, 16)
    assert ad(torch.randn(5, 12)).shape == (5, 16)


def test_pixel_decoder_upsamples_4x():
    dec = PixelDecoder(16)
    out = dec(BlendedFeature(torch.randn(16, 8, 8)))
    assert out.grid.shape == (16, 32, 32)


def test_score_head_scale_invariance():
    torch.manual_seed(0)
    head = ScoreHead(16)
    q = torch.randn(4, 16)
    vis = torch.randn(3, 16)
    txt = torch.zeros(0, 16)
    a = head(DecodedState(q, vis, txt), [0, 1, 2])
    b = head(DecodedState(q * 3.0, vis, txt), [0, 1, 2])
    assert a.logits.shape == (4, 4)
    assert torch.allclose(a.logits, b.logits, atol=1e-6)


def test_score_head_orthonormal_hand_case():
    head = ScoreHead(4)
    with torch.no_grad():
        head.log_temperature.zero_()              # tau = 1
        head.no_object.zero_()
        head.no_object[0] = 1.0
    d = DecodedState(torch.eye(2, 4), torch.eye(2, 4), torch.zeros(0, 4))
    logits = head(d, [0, 1]).logits
    expected = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert torch.allclose(logits, expected, atol=1e-6)


def test_mask_head_basis_vector_reads_channel():
    head = MaskHead(8, depth=3)
    with torch.no_grad():
        for layer in head.mlp:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
                layer.bias.zero_()
        head.mlp[-1].bias[3] = 1.0   # MLP output pinned to e_3
    fmask = torch.randn(8, 6, 6)
    out = head(torch.randn(2, 8), MaskFeature(fmask)).logits
    assert torch.allclose(out[0], fmask[3], atol=1e-6)
    assert torch.allclose(out[1], fmask[3], atol=1e-6)


def test_all_parameters_reached_by_gradients():
    rng = np.random.default_rng(21)
    model = tiny_model(dtype=torch.float64)
    img = rand_image(rng, 32, torch.float64)
    out = model(img, rand_prompts(rng, 2, 2, torch.float64))
    total = out.scores.logits.sum() + out.mask_logits.logits.sum()
    for s, m in out.aux:
        total = total + s.logits.sum() + m.logits.sum()
    total.backward()
    dead = [n for n, p in model.named_parameters()
            if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []


def test_prompt_encoder_width_validated():
    pool = [EncoderSpec("a", 8, 12, 1)]
    cfg = SegDecoderConfig(width=16, num_queries=4, num_heads=4, ffn_dim=32,
                           visual_dim=10, text_dim=12)
    with pytest.raises(Exception):
        SegModel(cfg, pool, pool[0], init_seed=0)
