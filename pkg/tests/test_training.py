import math
import zipfile
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch

from promptseg.encoders import ValidationError
from promptseg.losses import LossWeights
from promptseg.training import (CheckpointFormatError, CheckpointIntegrityError,
                                EpisodeSampler, SamplingError, ScheduleError,
                                TrainConfig, TrainingDivergedError,
                                build_optimizer, fit, load_checkpoint, lr_at_step,
                                restore_into, save_checkpoint, step_seed_for,
                                train_step)

from conftest import TINY_POOL, tiny_model

PAPER = TrainConfig()  # steps=50000, warmup=100, base_lr=1e-4


def small_tc(**kw):
    base = dict(steps=40, batch_size=4, base_lr=1e-3, warmup_steps=4,
                scale_jitter=(0.8, 1.25), crop_size=32, n_negatives=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def make_sampler(ds, model, tc, mask_size=16):
    return EpisodeSampler(ds, model.prompt_encoder, 11, model.cfg.text_dim, tc,
                          mask_size, dtype=model.dtype, view_scale=(0.6, 1.0))


# ---------------------------------------------------------------- schedule

def test_lr_schedule_endpoints_and_peak():
    assert lr_at_step(0, PAPER) == 0.0
    assert lr_at_step(100, PAPER) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at_step(50000, PAPER) == 0.0
    assert lr_at_step(25050, PAPER) == pytest.approx(
        1e-4 * (50000 - 25050) / (50000 - 100), rel=1e-12)


def test_lr_schedule_continuous_at_warmup():
    vals = [lr_at_step(s, PAPER) for s in (99, 100, 101)]
    assert vals[0] < vals[1] and vals[2] < vals[1]
    assert vals[1] - vals[0] == pytest.approx(1e-6, rel=1e-6)


def test_lr_schedule_out_of_range():
    with pytest.raises(ScheduleError):
        lr_at_step(-1, PAPER)
    with pytest.raises(ScheduleError):
        lr_at_step(50001, PAPER)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(steps=0)
    with pytest.raises(ValidationError):
        TrainConfig(steps=10, warmup_steps=10)
    with pytest.raises(ValidationError):
        TrainConfig(modalities="audio")


def test_step_seed_distinct():
    seeds = {step_seed_for(0, s) for s in range(500)}
    assert len(seeds) == 500
    assert step_seed_for(0, 3) != step_seed_for(1, 3)


# ---------------------------------------------------------------- batches

def test_make_batch_modality_ratio(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc())
    for step in range(5):
        batch = sampler.make_batch(step_seed_for(0, step + 1))
        kinds = [e.modality for e in batch]
        assert kinds.count("visual") == 2 and kinds.count("text") == 2


def test_make_batch_deterministic(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc())
    a = sampler.make_batch(1234)
    b = sampler.make_batch(1234)
    for ea, eb in zip(a, b):
        assert ea.modality == eb.modality and ea.meta == eb.meta
        assert torch.equal(ea.gt.masks, eb.gt.masks)
        for pa, pb in zip(ea.prompts, eb.prompts):
            assert torch.equal(pa.embeddings, pb.embeddings)


def test_make_batch_visual_count_over_many(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc(batch_size=8))
    count = 0
    strategies = Counter()
    for step in range(25):
        batch = sampler.make_batch(step_seed_for(7, step + 1))
        for e in batch:
            if e.modality == "visual":
                count += 1
                strategies[e.meta["strategy"]] += 1
    assert count == 100
    assert strategies["cross-image"] == 50 and strategies["crop-views"] == 50


def test_make_batch_modalities_override(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc(modalities="text"))
    batch = sampler.make_batch(99)
    assert all(e.modality == "text" for e in batch)


def test_odd_batch_rejected(small_ds):
    model = tiny_model()
    with pytest.raises(ValidationError):
        make_sampler(small_ds, model, small_tc(batch_size=3))


def test_cross_image_episode_contract(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc())
    rng = np.random.default_rng(0)
    picks = Counter()
    for _ in range(300):
        ep = sampler.sample_visual_episode_crossimage(rng)
        meta = ep.meta
        assert meta["strategy"] == "cross-image"
        assert meta["exemplar"] != meta["target"]
        c = meta["class"]
        picks[c] += 1
        assert set(ep.gt.class_ids) == {c}
        assert all(cid == c for cid in ep.prompts[0].class_ids)
        assert all(col == 0 for col in ep.gt.prompt_columns)
    # all three classes share the hosts roughly evenly
    assert len(picks) == 3
    assert all(45 <= v <= 175 for v in picks.values())


def test_crop_view_episode_contract(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc())
    rng = np.random.default_rng(1)
    for _ in range(40):
        ep = sampler.sample_visual_episode_cropviews(rng)
        assert ep.meta["strategy"] == "crop-views"
        assert len(ep.prompts[0]) == 1
        assert set(ep.gt.class_ids) == {ep.meta["class"]}
        assert len(ep.gt) >= 1


def test_text_episode_contract(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc(n_negatives=2))
    rng = np.random.default_rng(2)
    for _ in range(100):
        ep = sampler.sample_text_episode(rng)
        prompt_ids = ep.prompts[0].class_ids
        present = sorted(set(ep.target.class_ids))  # classes after augmentation
        assert set(present) <= set(prompt_ids)
        n_extra = len(prompt_ids) - len(present)
        assert n_extra == min(2, 3 - len(present))
        # every gt row points at a prompt column of its own class
        for cid, col in zip(ep.gt.class_ids, ep.gt.prompt_columns):
            assert prompt_ids[col] == cid


def test_text_episode_no_negatives(small_ds):
    model = tiny_model()
    sampler = make_sampler(small_ds, model, small_tc(n_negatives=0))
    rng = np.random.default_rng(3)
    ep = sampler.sample_text_episode(rng)
    present = sorted(set(ep.target.class_ids))
    assert sorted(ep.prompts[0].class_ids) == present


# ---------------------------------------------------------------- stepping

def test_train_step_zero_lr_freezes_params(small_ds):
    model = tiny_model()
    tc = small_tc(warmup_steps=4)
    sampler = make_sampler(small_ds, model, tc)
    optimizer = build_optimizer(model, tc)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    batch = sampler.make_batch(step_seed_for(0, 0))
    train_step(model, batch, optimizer, 0, tc, LossWeights())  # lr_at_step(0) = 0
    for n, p in model.named_parameters():
        assert torch.equal(before[n], p)


def test_train_step_deterministic(small_ds):
    outs = []
    for _ in range(2):
        model = tiny_model(dtype=torch.float64)
        tc = small_tc()
        sampler = make_sampler(small_ds, model, tc)
        optimizer = build_optimizer(model, tc)
        for step in (1, 2):
            batch = sampler.make_batch(step_seed_for(0, step))
            stats = train_step(model, batch, optimizer, step, tc, LossWeights())
        outs.append((stats["loss"], {n: p.detach().clone()
                                      for n, p in model.named_parameters()}))
    assert outs[0][0] == outs[1][0]
    for n in outs[0][1]:
        assert torch.equal(outs[0][1][n], outs[1][1][n])


def test_train_step_diverged_raises(small_ds):
    model = tiny_model()
    tc = small_tc()
    sampler = make_sampler(small_ds, model, tc)
    optimizer = build_optimizer(model, tc)
    with torch.no_grad():
        model.query_embed.fill_(float("nan"))
    batch = sampler.make_batch(step_seed_for(0, 1))
    with pytest.raises(TrainingDivergedError) as err:
        train_step(model, batch, optimizer, 1, tc, LossWeights())
    assert err.value.step == 1
    assert len(err.value.episode_meta) == len(batch)


def test_overfit_single_scene(small_ds):
    # loss on a pinned batch must collapse under repeated steps
    model = tiny_model(decoder_blocks=2, num_queries=8)
    tc = small_tc(steps=300, warmup_steps=10, base_lr=2e-3, batch_size=2,
                  modalities="text", n_negatives=0)
    sampler = make_sampler(small_ds, model, tc)
    optimizer = build_optimizer(model, tc)
    batch = sampler.make_batch(step_seed_for(0, 1))
    first = last = None
    for step in range(1, 301):
        stats = train_step(model, batch, optimizer, step, tc, LossWeights())
        if step == 1:
            first = stats["loss"]
        last = stats["loss"]
    assert last < 0.1 * first


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, small_ds):
    model = tiny_model(dtype=torch.float64)
    tc = small_tc(steps=3, warmup_steps=1)
    sampler = make_sampler(small_ds, model, tc)
    optimizer = build_optimizer(model, tc)
    for step in (1, 2):
        batch = sampler.make_batch(step_seed_for(0, step))
        train_step(model, batch, optimizer, step, tc, LossWeights())
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, optimizer, 2, {"profile": "tiny"})
    ckpt = load_checkpoint(path)
    assert ckpt.step == 2 and ckpt.config == {"profile": "tiny"}

    clone = tiny_model(init_seed=5, dtype=torch.float64)
    opt2 = build_optimizer(clone, tc)
    restore_into(clone, opt2, ckpt)
    for (n, a), (_, b) in zip(model.named_parameters(), clone.named_parameters()):
        assert torch.equal(a, b), n
    # one more step on each must agree bit for bit
    batch = sampler.make_batch(step_seed_for(0, 3))
    s1 = train_step(model, batch, optimizer, 3, tc, LossWeights())
    s2 = train_step(clone, batch, opt2, 3, tc, LossWeights())
    assert s1["loss"] == s2["loss"]
    for (_, a), (_, b) in zip(model.named_parameters(), clone.named_parameters()):
        assert torch.equal(a, b)


def test_checkpoint_save_is_byte_stable(tmp_path, small_ds):
    model = tiny_model(dtype=torch.float64)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, model, None, 0, {})
    save_checkpoint(b, model, None, 0, {})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_format_gate(tmp_path):
    model = tiny_model()
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, None, 1, {})
    import json
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        names = [n for n in z.namelist() if n != "manifest.json"]
        blobs = {n: z.read(n) for n in names}
    manifest["format"] = 999
    with zipfile.ZipFile(path, "w") as z:
        z.writestr("manifest.json", json.dumps(manifest))
        for n, blob in blobs.items():
            z.writestr(n, blob)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_integrity_gate(tmp_path):
    model = tiny_model()
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, model, None, 1, {})
    import json
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        names = [n for n in z.namelist() if n != "manifest.json"]
        blobs = {n: z.read(n) for n in names}
    victim = sorted(blobs)[0]
    blobs[victim] = blobs[victim][:-1] + bytes([blobs[victim][-1] ^ 1])
    with zipfile.ZipFile(path, "w") as z:
        z.writestr("manifest.json", json.dumps(manifest))
        for n, blob in blobs.items():
            z.writestr(n, blob)
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


# ---------------------------------------------------------------- fit

def test_fit_resume_matches_uninterrupted(tmp_path, small_ds):
    tc = small_tc(steps=6, warmup_steps=2)
    w = LossWeights()

    straight = tiny_model(dtype=torch.float64)
    full = fit(straight, small_ds, tc, w, out_dir=tmp_path / "full",
               checkpoint_every=3)

    # the step-3 checkpoint stands in for an interrupted run
    resumed = tiny_model(dtype=torch.float64)
    tail = fit(resumed, small_ds, tc, w, out_dir=tmp_path / "tail",
               resume=tmp_path / "full" / "step000003.ckpt")

    assert [h[0] for h in full.history] == [1, 2, 3, 4, 5, 6]
    assert [h[0] for h in tail.history] == [4, 5, 6]
    for (sa, la, ra), (sb, lb, rb) in zip(full.history[3:], tail.history):
        assert sa == sb and la == lb and ra == rb
    for (_, a), (_, b) in zip(straight.named_parameters(), resumed.named_parameters()):
        assert torch.equal(a, b)


def test_fit_rejects_bad_crop_stride(small_ds):
    model = tiny_model()
    with pytest.raises(ValidationError):
        fit(model, small_ds, small_tc(crop_size=34), LossWeights())
