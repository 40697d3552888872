"""Command line surface: dataset generation, training, evaluation, prediction.

Exit codes: 0 success, 2 usage or config error, 3 refusing to overwrite an
existing dataset, 4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml
from PIL import Image

from .config import (
    ConfigError,
    RunConfig,
    build_loss_weights,
    build_model,
    build_scene_spec,
    build_vocabulary,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .encoders import ValidationError, VocabularyError, encode_text_prompts, \
    encode_visual_prompts
from .evalloops import EVAL_MODES, evaluate, evaluate_vos
from .inference import segment
from .synthdata import DatasetExistsError, generate_dataset, load_dataset
from .training import TrainingDivergedError, fit, load_checkpoint, restore_into


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_cfg(ctx) -> RunConfig:
    opts = ctx.obj
    try:
        return load_config(opts["config"], profile=opts["profile"], seed=opts["seed"])
    except FileNotFoundError as e:
        _fail(2, f"config file not found: {e}")
    except (ConfigError, ValidationError, yaml.YAMLError) as e:
        _fail(2, str(e))


def _load_dataset_or_fail(cfg: RunConfig):
    root = Path(cfg.data.root)
    if not (root / "annotations.json").exists():
        _fail(2, f"no dataset under {root}; run 'promptseg generate' first")
    return load_dataset(root)


def _model_from_checkpoint(path: str, fallback: RunConfig):
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        _fail(2, f"checkpoint not found: {path}")
    except ValidationError as e:
        _fail(2, str(e))
    cfg = config_from_dict(ckpt.config) if ckpt.config else fallback
    model = build_model(cfg)
    restore_into(model, None, ckpt)
    model.eval()
    return model, cfg, ckpt


def _read_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.moveaxis(arr, 2, 0).astype(np.float32) / 255.0


def _read_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML config file; omitted keys fall back to the profile.")
@click.option("--profile", type=str, default=None,
              help="Named profile (desk, paper); overrides the file's choice.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.pass_context
def main(ctx, config_path, profile, seed):
    """Prompt-driven segmentation toolkit."""
    ctx.obj = {"config": config_path, "profile": profile, "seed": seed}


@main.command()
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Dataset directory (default: data.root from the config).")
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@click.pass_context
def generate(ctx, out_dir, force):
    """Write the synthetic shapes benchmark to disk."""
    cfg = _load_cfg(ctx)
    spec = build_scene_spec(cfg)
    target = out_dir or cfg.data.root
    try:
        summary = generate_dataset(spec, cfg.data.n_images, target, force=force)
    except DatasetExistsError as e:
        _fail(3, str(e))
    click.echo(f"wrote {summary['n_images']} scenes to {target} "
               f"({summary['n_train']} train / {summary['n_val']} val)")
    for name, count in sorted(summary["class_counts"].items()):
        click.echo(f"instances[{name}]={count}")


@main.command()
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory for checkpoints and the loss log.")
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to resume from.")
@click.option("--steps", type=int, default=None, help="Override train.steps.")
@click.option("--checkpoint-every", type=int, default=0,
              help="Also checkpoint every N steps (final step always saved).")
@click.option("--plot", is_flag=True, help="Write a loss curve image to the run directory.")
@click.pass_context
def train(ctx, out_dir, resume, steps, checkpoint_every, plot):
    """Co-train the decoder on the generated benchmark."""
    cfg = _load_cfg(ctx)
    if steps is not None:
        if steps < 1:
            _fail(2, f"--steps must be >= 1, got {steps}")
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=steps))
    dataset = _load_dataset_or_fail(cfg)
    model = build_model(cfg)
    run_dir = Path(out_dir or f"runs/{cfg.profile}")
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "loss_log.tsv"
    log_file = log_path.open("a" if resume else "w")

    def log_fn(step, loss, lr):
        log_file.write(f"{step}\t{loss!r}\t{lr!r}\n")
        log_file.flush()
        if step % 50 == 0 or step == cfg.train.steps:
            click.echo(f"step {step} loss {loss:.4f} lr {lr:.2e}")

    try:
        result = fit(model, dataset, cfg.train, build_loss_weights(cfg),
                     text_seed=cfg.pool.text_seed, out_dir=run_dir / "checkpoints",
                     log_fn=log_fn, resume=resume, checkpoint_every=checkpoint_every,
                     config_echo=config_to_dict(cfg))
    except TrainingDivergedError as e:
        dump = run_dir / "divergence.json"
        dump.write_text(json.dumps({"step": e.step, "episodes": e.episode_meta}, indent=1))
        log_file.close()
        _fail(4, f"{e}; episode dump in {dump}")
    except ValidationError as e:
        log_file.close()
        _fail(2, str(e))
    log_file.close()
    if plot:
        _plot_history(result.history, run_dir / "loss_curve.png")
    if result.checkpoint_path is not None:
        click.echo(f"final checkpoint: {result.checkpoint_path}")


def _plot_history(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [h[0] for h in history]
    losses = [h[1] for h in history]
    lrs = [h[2] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, losses)
    ax1.set_ylabel("loss")
    ax2.plot(steps, lrs)
    ax2.set_ylabel("lr")
    ax2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--task", type=str, default="text",
              help="text, visual, fused, fewshot, vos, or all.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the metrics as JSON.")
@click.option("--max-images", type=int, default=None,
              help="Cap the number of validation images per task.")
@click.pass_context
def eval_cmd(ctx, checkpoint, task, out_path, max_images):
    """Score a checkpoint on the validation split."""
    cfg = _load_cfg(ctx)
    tasks = list(EVAL_MODES) + ["vos"] if task == "all" else [task]
    for t in tasks:
        if t not in EVAL_MODES and t != "vos":
            _fail(2, f"unknown task {t!r}; expected one of {EVAL_MODES + ('vos', 'all')}")
    model, cfg, _ = _model_from_checkpoint(checkpoint, cfg)
    dataset = _load_dataset_or_fail(cfg)
    e = cfg.eval
    results = {}
    for t in tasks:
        if t == "vos":
            report = evaluate_vos(model, build_scene_spec(cfg), n_videos=e.vos_videos,
                                  n_frames=e.vos_frames, capacity=e.vos_capacity,
                                  score_threshold=e.vos_score_threshold,
                                  mask_threshold=e.mask_threshold)
        else:
            report = evaluate(model, dataset, t, text_seed=cfg.pool.text_seed,
                              score_threshold=e.score_threshold,
                              mask_threshold=e.mask_threshold, overlap_keep=e.overlap_keep,
                              fewshot_shots=e.fewshot_shots, max_images=max_images)
        results[t] = {"scalars": report.scalars, "per_class": report.per_class}
        for line in report.to_lines():
            click.echo(f"{t}.{line}")
    if out_path:
        Path(out_path).write_text(json.dumps(results, indent=1))


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--text", "text_names", type=str, multiple=True,
              help="Class name to prompt with; repeatable.")
@click.option("--example", "examples", type=(str, str, str), multiple=True,
              help="IMAGE MASK CLASS exemplar triple; repeatable.")
@click.option("--out", "out_dir", type=click.Path(), default="predictions")
@click.pass_context
def predict(ctx, checkpoint, image_path, text_names, examples, out_dir):
    """Segment one image with text and/or visual prompts."""
    cfg = _load_cfg(ctx)
    if not text_names and not examples:
        _fail(2, "provide --text and/or --example prompts")
    model, cfg, _ = _model_from_checkpoint(checkpoint, cfg)
    vocab = build_vocabulary(cfg)
    try:
        image = _read_image(image_path)
    except FileNotFoundError:
        _fail(2, f"image not found: {image_path}")
    text = None
    if text_names:
        try:
            ids = [vocab.id_of(n) for n in text_names]
        except VocabularyError as e:
            _fail(2, str(e))
        text = encode_text_prompts(ids, vocab, cfg.pool.text_seed, model.cfg.text_dim,
                                   dtype=model.dtype)
    visual = None
    if examples:
        masks, cids = [], []
        frames = []
        for img_p, mask_p, cls_name in examples:
            try:
                cid = vocab.id_of(cls_name)
            except VocabularyError as e:
                _fail(2, str(e))
            frames.append((_read_image(img_p), _read_mask(mask_p), cid))
        try:
            groups = [encode_visual_prompts(torch.from_numpy(img).to(model.dtype),
                                            [torch.from_numpy(mask)], [cid],
                                            model.prompt_encoder)
                      for img, mask, cid in frames]
        except ValidationError as e:
            _fail(2, str(e))
        emb = torch.cat([g.embeddings for g in groups], dim=0)
        from .encoders import PromptTokens, VISUAL
        visual = PromptTokens(embeddings=emb,
                              class_ids=[c for g in groups for c in g.class_ids],
                              modality=VISUAL)
    e = cfg.eval
    result = segment(model, image, visual=visual, text=text,
                     score_threshold=e.score_threshold, mask_threshold=e.mask_threshold,
                     overlap_keep=e.overlap_keep)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = "fused" if (visual is not None and text is not None) else \
        ("visual" if visual is not None else "text")
    sidecar = {"mode": mode, "classes": vocab.names, "instances": []}
    for i, inst in enumerate(result.instances):
        mask_file = f"instance_{i:02d}.png"
        Image.fromarray(inst.mask.astype(np.uint8) * 255, mode="L").save(out / mask_file)
        sidecar["instances"].append({"mask": mask_file, "class": vocab.names[inst.class_id],
                                     "confidence": inst.confidence})
    semantic = (result.semantic + 1).astype(np.uint8)  # void becomes 0
    Image.fromarray(semantic, mode="L").save(out / "semantic.png")
    Image.fromarray(result.panoptic_ids.astype(np.uint8), mode="L").save(out / "panoptic.png")
    sidecar["semantic"] = "semantic.png"
    sidecar["panoptic"] = "panoptic.png"
    sidecar["panoptic_segments"] = [
        {"id": s.segment_id, "class": vocab.names[s.class_id], "thing": s.is_thing}
        for s in result.panoptic_segments]
    (out / "result.json").write_text(json.dumps(sidecar, indent=1))
    click.echo(f"{len(result.instances)} instances -> {out}")


if __name__ == "__main__":
    main()
