"""Command implementations behind the CLI; registered into the dispatcher."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .adapters import (
    ControlBranch,
    FusionSpec,
    edge_map,
    generate_with_visual_prompt,
    make_ip_adapter,
)
from .autoencoder import IdentityCodec
from .beautify import HTTPCompletionClient, beautify
from .checkpoint import load_unet, save_unet
from .conditioning import EncoderSpec
from .datapipe import (
    DEFAULT_DEDUP_THRESHOLD,
    FilterRule,
    build_curriculum,
    dedup,
    filter_records,
    read_manifest,
    score_phashes,
    score_records,
    write_manifest,
)
from .diffusion import SampleTrace
from .distill import DistillConfig, refine as refine_image, student_sample
from .animation import (
    CameraTrajectory,
    SyntheticDepthEstimator,
    animate as run_animation,
    save_animation,
)
from .errors import ConfigError, DependencyError
from .inpaint import inpaint_sample, load_mask_png, outpaint_expand, save_mask_png
from .pipeline import Pipeline
from .runs import RunContext, command
from .schedule import NoiseSchedule, student_schedule
from .train import (
    MetricsLogger,
    TrainConfig,
    curated_slice,
    distill_run,
    finetune_inpaint,
    train_base,
)
from .unet import UNetConfig


def _encoder_spec(ctx: RunContext) -> EncoderSpec:
    return EncoderSpec(**ctx.config.encoder)


def _schedule(ctx: RunContext) -> NoiseSchedule:
    return NoiseSchedule.from_dict(ctx.config.schedule)


def _unet_cfg(ctx: RunContext) -> UNetConfig:
    raw = dict(ctx.config.model)
    for key in ("level_multipliers", "attention_levels"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return UNetConfig(**raw)


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _load_model(ctx: RunContext, option: str = "checkpoint", expect_in_channels=None):
    path = ctx.options.get(option)
    if not path:
        raise DependencyError(f"command {ctx.command!r} requires --{option.replace('_', '-')}")
    path = ctx.note_input(option, path)
    if not Path(path).exists():
        raise DependencyError(f"{option} not found at {path}")
    model, manifest = load_unet(path, expect_in_channels=expect_in_channels)
    model.eval()
    return model, manifest


def _pipeline(ctx: RunContext, model) -> Pipeline:
    return Pipeline(model, IdentityCodec(), _schedule(ctx), _encoder_spec(ctx))


def _size(ctx: RunContext) -> tuple:
    width = int(ctx.options.get("width") or 32)
    height = int(ctx.options.get("height") or 32)
    aspect = ctx.options.get("aspect")
    if aspect:
        width, height = ctx.config.resolve_size(aspect, min(width, height))
    ctx.config.validate_resolution(width, height)
    return width, height


def _maybe_beautify(ctx: RunContext, prompt: str) -> str:
    if not ctx.options.get("beautify"):
        return prompt
    endpoint = ctx.config.beautify_endpoint
    client = HTTPCompletionClient(endpoint) if endpoint else None
    expanded = beautify(prompt, client)
    ctx.metrics["beautified_prompt"] = expanded
    return expanded


@command("train")
def cmd_train(ctx: RunContext) -> None:
    manifest_path = ctx.note_input("manifest", ctx.options["manifest"])
    records = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    cfg = TrainConfig(
        steps=int(ctx.options.get("steps") or 200),
        batch_size=int(ctx.options.get("batch_size") or 16),
        lr=float(ctx.options.get("lr") or 2e-3),
        seed=ctx.seed or 0,
    )
    metrics = MetricsLogger(ctx.artifact_path("metrics", "metrics.jsonl"))
    model = train_base(records, root, _unet_cfg(ctx), _schedule(ctx), cfg,
                       IdentityCodec(), _encoder_spec(ctx), metrics)
    ckpt = ctx.artifact_path("checkpoint", "checkpoint")
    save_unet(model, ckpt, step=cfg.steps, seed=cfg.seed)
    ctx.metrics["steps"] = cfg.steps


@command("train-inpaint")
def cmd_train_inpaint(ctx: RunContext) -> None:
    base, _ = _load_model(ctx, "checkpoint", expect_in_channels=4)
    manifest_path = ctx.note_input("manifest", ctx.options["manifest"])
    records = read_manifest(manifest_path)
    cfg = TrainConfig(steps=int(ctx.options.get("steps") or 100),
                      batch_size=int(ctx.options.get("batch_size") or 8),
                      lr=float(ctx.options.get("lr") or 1e-3),
                      seed=ctx.seed or 0)
    metrics = MetricsLogger(ctx.artifact_path("metrics", "metrics.jsonl"))
    model = finetune_inpaint(base, records, Path(manifest_path).parent, _schedule(ctx),
                             cfg, IdentityCodec(), _encoder_spec(ctx), metrics)
    save_unet(model, ctx.artifact_path("checkpoint", "checkpoint"),
              step=cfg.steps, seed=cfg.seed)


@command("sample")
def cmd_sample(ctx: RunContext) -> None:
    model, _ = _load_model(ctx, "checkpoint", expect_in_channels=4)
    width, height = _size(ctx)
    prompt = _maybe_beautify(ctx, ctx.options.get("prompt") or "")
    trace = SampleTrace()
    pipe = _pipeline(ctx, model)
    steps = ctx.options.get("steps")
    timesteps = None
    if steps:
        timesteps = sorted({int(round(v)) for v in
                            np.linspace(pipe.sched.T - 1, 0, int(steps))}, reverse=True)
    image = pipe.text_to_image(
        prompt, ctx.seed, height, width,
        guidance_scale=float(ctx.options.get("guidance") or 4.0),
        negative_prompt=ctx.options.get("negative"),
        timesteps=timesteps,
        trace=trace,
    )
    ctx.save_image("image", "image.png", image)
    ctx.metrics["nfe"] = trace.nfe


@command("inpaint")
def cmd_inpaint(ctx: RunContext) -> None:
    model, _ = _load_model(ctx, "checkpoint", expect_in_channels=9)
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    mask = load_mask_png(ctx.note_input("mask", ctx.options["mask"]))
    trace = SampleTrace()
    out = inpaint_sample(
        model, image, mask,
        prompt=ctx.options.get("prompt"),
        guidance_scale=float(ctx.options.get("guidance") or 4.0),
        sched=_schedule(ctx),
        seed=ctx.seed,
        codec=IdentityCodec(),
        encoder_spec=_encoder_spec(ctx),
        negative_prompt=ctx.options.get("negative"),
        trace=trace,
    )
    ctx.save_image("image", "image.png", out)
    ctx.metrics["nfe"] = trace.nfe


@command("outpaint")
def cmd_outpaint(ctx: RunContext) -> None:
    model, _ = _load_model(ctx, "checkpoint", expect_in_channels=9)
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    expanded, border = outpaint_expand(
        image, ctx.options["direction"], int(ctx.options["pixels"]),
        max_canvas=ctx.config.max_resolution,
    )
    save_mask_png(border, ctx.artifact_path("border_mask", "border_mask.png"))
    out = inpaint_sample(
        model, expanded, border,
        prompt=ctx.options.get("prompt"),
        guidance_scale=float(ctx.options.get("guidance") or 4.0),
        sched=_schedule(ctx),
        seed=ctx.seed,
        codec=IdentityCodec(),
        encoder_spec=_encoder_spec(ctx),
    )
    ctx.save_image("image", "image.png", out)


@command("distill")
def cmd_distill(ctx: RunContext) -> None:
    teacher, _ = _load_model(ctx, "checkpoint", expect_in_channels=4)
    manifest_path = ctx.note_input("manifest", ctx.options["manifest"])
    records = read_manifest(manifest_path)
    if any("aesthetic" in r.scores for r in records):
        records = curated_slice(records, float(ctx.options.get("fraction") or 0.1))
    cfg = DistillConfig(
        teacher_match_weight=float(ctx.options.get("match_weight") or 1.0),
        teacher_rollout_steps=int(ctx.options.get("rollout") or 4),
    )
    metrics = MetricsLogger(ctx.artifact_path("metrics", "metrics.jsonl"))
    student, trainer = distill_run(
        teacher, records, Path(manifest_path).parent, cfg,
        steps=int(ctx.options.get("steps") or 200),
        codec=IdentityCodec(), encoder_spec=_encoder_spec(ctx),
        batch_size=int(ctx.options.get("batch_size") or 8),
        seed=ctx.seed or 0, teacher_sched=_schedule(ctx), metrics=metrics,
    )
    save_unet(student, ctx.artifact_path("checkpoint", "student"),
              step=trainer.step_count, seed=ctx.seed or 0,
              extra_meta={"role": "student", "lr_ratio": trainer.applied_lr_ratio})
    ctx.metrics["lr_ratio"] = trainer.applied_lr_ratio


@command("refine")
def cmd_refine(ctx: RunContext) -> None:
    student, _ = _load_model(ctx, "student", expect_in_channels=4)
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    out, trace = refine_image(image, student, student_schedule(), seed=ctx.seed,
                              codec=IdentityCodec(), prompt=ctx.options.get("prompt"),
                              encoder_spec=_encoder_spec(ctx))
    ctx.save_image("image", "image.png", out)
    ctx.metrics["nfe"] = trace.nfe
    ctx.metrics["trace"] = trace.events


@command("student-sample")
def cmd_student_sample(ctx: RunContext) -> None:
    student, _ = _load_model(ctx, "student", expect_in_channels=4)
    width, height = _size(ctx)
    image, trace = student_sample(student, ctx.options.get("prompt"), ctx.seed,
                                  student_schedule(), IdentityCodec(),
                                  _encoder_spec(ctx), height, width)
    ctx.save_image("image", "image.png", image)
    ctx.metrics["nfe"] = trace.nfe


def _visual_prompt_command(ctx: RunContext, regime: str, spec: FusionSpec) -> None:
    model, _ = _load_model(ctx, "checkpoint", expect_in_channels=4)
    enc = _encoder_spec(ctx)
    adapter = make_ip_adapter(model, visual_dim=enc.visual_dim,
                              seed=int(ctx.options.get("adapter_seed") or 0))
    adapter_ckpt = ctx.options.get("adapter")
    if adapter_ckpt:
        from .checkpoint import load_tensors

        state, _ = load_tensors(ctx.note_input("adapter", adapter_ckpt))
        adapter.load_state_dict(state)
    width, height = _size(ctx)
    trace = SampleTrace()
    image = generate_with_visual_prompt(
        regime, spec, model, adapter, _schedule(ctx), ctx.seed, IdentityCodec(),
        enc, height, width, guidance_scale=float(ctx.options.get("guidance") or 1.0),
        trace=trace,
    )
    ctx.save_image("image", "image.png", image)
    ctx.metrics["nfe"] = trace.nfe
    ctx.metrics["regime"] = regime


@command("variations")
def cmd_variations(ctx: RunContext) -> None:
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    _visual_prompt_command(ctx, "variations", FusionSpec(images=[image]))


@command("fuse")
def cmd_fuse(ctx: RunContext) -> None:
    paths = ctx.options["images"]
    images = [_load_image(ctx.note_input(f"image_{i}", p)) for i, p in enumerate(paths)]
    weights = ctx.options.get("weights")
    spec = FusionSpec(images=images,
                      weights=[float(w) for w in weights] if weights else None)
    _visual_prompt_command(ctx, "image_fusion", spec)


@command("fuse-text")
def cmd_fuse_text(ctx: RunContext) -> None:
    paths = ctx.options["images"]
    images = [_load_image(ctx.note_input(f"image_{i}", p)) for i, p in enumerate(paths)]
    spec = FusionSpec(images=images, text=ctx.options.get("prompt") or "")
    _visual_prompt_command(ctx, "image_text_fusion", spec)


@command("control")
def cmd_control(ctx: RunContext) -> None:
    model, _ = _load_model(ctx, "checkpoint", expect_in_channels=4)
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    edges = edge_map(image, detector=ctx.options.get("detector") or "gradient",
                     endpoint=ctx.options.get("edge_endpoint"))
    Image.fromarray((edges * 255).astype(np.uint8), mode="L").save(
        ctx.artifact_path("edges", "edges.png"))
    branch = ControlBranch(model)
    branch_ckpt = ctx.options.get("branch")
    if branch_ckpt:
        from .checkpoint import load_tensors

        state, _ = load_tensors(ctx.note_input("branch", branch_ckpt))
        branch.load_state_dict(state)
    from .adapters import attach_controlnet

    controlled = attach_controlnet(model, branch, edges)
    pipe = Pipeline(controlled, IdentityCodec(), _schedule(ctx), _encoder_spec(ctx))
    width, height = edges.shape[1], edges.shape[0]
    ctx.config.validate_resolution(width, height)
    out = pipe.text_to_image(ctx.options.get("prompt"), ctx.seed, height, width,
                             guidance_scale=float(ctx.options.get("guidance") or 4.0))
    ctx.save_image("image", "image.png", out)


@command("animate")
def cmd_animate(ctx: RunContext) -> None:
    image = _load_image(ctx.note_input("image", ctx.options["image"]))
    traj_cfg = ctx.options.get("trajectory")
    if traj_cfg:
        raw = json.loads(Path(ctx.note_input("trajectory", traj_cfg)).read_text())
        trajectory = CameraTrajectory(
            scenes=[{k: [tuple(p) for p in v] for k, v in scene.items()}
                    for scene in raw["scenes"]],
            fps=int(raw.get("fps", 24)),
            scene_seconds=float(raw.get("scene_seconds", 4.0)),
        )
    else:
        trajectory = CameraTrajectory.linear(x=float(ctx.options.get("dx") or 0.25),
                                             fps=int(ctx.options.get("fps") or 24))
    strength = float(ctx.options.get("strength") or 0.0)
    refiner = None
    if strength > 0:
        student_path = ctx.options.get("student")
        if not student_path:
            raise DependencyError("animate with strength > 0 needs --student checkpoint")
        student, _ = load_unet(ctx.note_input("student", student_path),
                               expect_in_channels=4)
        student.eval()
        pipe = Pipeline(student, IdentityCodec(), student_schedule(), _encoder_spec(ctx))
        prompt = ctx.options.get("prompt")

        def refiner(frame, s, seed):
            return pipe.image_to_image(frame, s, seed, prompt=prompt)

    result = run_animation(
        image, trajectory, strength, refiner, seed=ctx.seed or 0,
        estimator=SyntheticDepthEstimator(kind=ctx.options.get("depth") or "luma"),
        frame_count=int(ctx.options["frames"]) if ctx.options.get("frames") else None,
    )
    out = ctx.artifact_path("frames", "frames")
    manifest = save_animation(result, out)
    ctx.metrics["frame_count"] = len(result.frames)
    ctx.artifacts["animation_manifest"] = str(manifest)


@command("datafilter")
def cmd_datafilter(ctx: RunContext) -> None:
    manifest_path = ctx.note_input("manifest", ctx.options["manifest"])
    records = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = score_records(records, root)
    chain = [
        FilterRule("aesthetic", float(ctx.options.get("aesthetic") or 0.0)),
        FilterRule("watermark", float(ctx.options.get("watermark") or 0.0)),
        FilterRule("clip_sim", float(ctx.options.get("clip_sim") or 0.0)),
    ]
    kept, rejected = filter_records(records, chain)
    write_manifest(reroot_records(kept, root, ctx.dir),
                   ctx.artifact_path("manifest", "filtered.jsonl"))
    report = {
        "input": len(records),
        "kept": len(kept),
        "rejected": len(rejected),
        "reasons": {},
    }
    for r in rejected:
        report["reasons"][r.reason] = report["reasons"].get(r.reason, 0) + 1
    ctx.artifact_path("report", "report.json").write_text(json.dumps(report, indent=2))
    ctx.metrics.update(report)


@command("dedup")
def cmd_dedup(ctx: RunContext) -> None:
    manifest_path = ctx.note_input("manifest", ctx.options["manifest"])
    records = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = score_phashes(records, root)
    kept = dedup(records, threshold=int(ctx.options.get("threshold")
                                        or DEFAULT_DEDUP_THRESHOLD))
    write_manifest(kept, ctx.artifact_path("manifest", "deduped.jsonl"))
    ctx.metrics.update({"input": len(records), "kept": len(kept)})


@command("beautify")
def cmd_beautify(ctx: RunContext) -> None:
    prompt = ctx.options.get("prompt") or ""
    endpoint = ctx.options.get("endpoint") or ctx.config.beautify_endpoint
    client = HTTPCompletionClient(endpoint) if endpoint else None
    expanded = beautify(prompt, client)
    ctx.artifact_path("prompt", "prompt.txt").write_text(expanded, encoding="utf-8")
    ctx.metrics["expanded"] = expanded != prompt


@command("curriculum")
def cmd_curriculum(ctx: RunContext) -> None:
    scale = float(ctx.options.get("scale") or 1.0)
    stages = build_curriculum(scale_factor=scale)
    table = [dataclasses.asdict(s) for s in stages]
    ctx.artifact_path("stages", "curriculum.json").write_text(json.dumps(table, indent=2))
    ctx.metrics["stages"] = len(stages)
    ctx.metrics["scale"] = scale
