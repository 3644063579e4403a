"""Command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 missing dependency,
4 divergence or artifact-integrity failure.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click

from . import commands  # noqa: F401 - registers command handlers
from .errors import (
    ConfigError,
    DependencyError,
    DivergenceError,
    IntegrityError,
    UsageError,
)
from .runs import GlobalConfig, run

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_INTEGRITY = 4


def _global_config(config_path, out_root) -> GlobalConfig:
    overrides = {"out_root": out_root} if out_root else {}
    return GlobalConfig.load(Path(config_path) if config_path else None, overrides)


def _execute(command_name: str, config_path, out_root, seed, **options):
    config = _global_config(config_path, out_root)
    manifest = run(command_name, config, seed=seed, options=options)
    click.echo(manifest.to_json())
    return manifest


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML config file; flags override its keys.")(fn)
    fn = click.option("--out-root", default=None, help="Run directory root.")(fn)
    return fn


seed_option = click.option("--seed", type=int, required=True,
                           help="RNG seed (recorded in the run manifest).")


@click.group()
def cli():
    """Desk-scale latent diffusion studio."""


@cli.command()
@common_options
@seed_option
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
def train(config_path, out_root, seed, **options):
    """Train the base denoiser on a JSONL manifest."""
    _execute("train", config_path, out_root, seed, **options)


@cli.command("train-inpaint")
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
def train_inpaint(config_path, out_root, seed, **options):
    """Expand the base model to 9 channels and fine-tune for inpainting."""
    _execute("train-inpaint", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--prompt", default="")
@click.option("--negative", default=None, help="Negative prompt (replaces the unconditional branch).")
@click.option("--guidance", type=float, default=4.0)
@click.option("--width", type=int, default=32)
@click.option("--height", type=int, default=32)
@click.option("--aspect", default=None, help="Aspect ratio, e.g. 3:2 (overrides width/height).")
@click.option("--steps", type=int, default=None)
@click.option("--beautify", is_flag=True, default=False)
def sample(config_path, out_root, seed, **options):
    """Text-to-image generation."""
    _execute("sample", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--mask", required=True, type=click.Path(exists=True))
@click.option("--prompt", default=None)
@click.option("--negative", default=None)
@click.option("--guidance", type=float, default=4.0)
def inpaint(config_path, out_root, seed, **options):
    """Resample the masked region of an image under a prompt."""
    _execute("inpaint", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--direction", required=True,
              type=click.Choice(["left", "right", "top", "bottom"]))
@click.option("--pixels", required=True, type=int)
@click.option("--prompt", default=None)
@click.option("--guidance", type=float, default=4.0)
def outpaint(config_path, out_root, seed, **options):
    """Expand the canvas and generate the new border region."""
    _execute("outpaint", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--match-weight", type=float, default=None)
@click.option("--fraction", type=float, default=None,
              help="Curated top-aesthetic slice of the manifest.")
def distill(config_path, out_root, seed, **options):
    """Adversarially distill the base model into a 4-step student."""
    _execute("distill", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--student", required=True, type=click.Path())
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--prompt", default=None)
def refine(config_path, out_root, seed, **options):
    """Re-noise a finished image to step 2 of 4 and denoise with the student."""
    _execute("refine", config_path, out_root, seed, **options)


@cli.command("student-sample")
@common_options
@seed_option
@click.option("--student", required=True, type=click.Path())
@click.option("--prompt", default="")
@click.option("--width", type=int, default=32)
@click.option("--height", type=int, default=32)
def student_sample_cmd(config_path, out_root, seed, **options):
    """Generate with the distilled student (4 denoiser passes, no CFG)."""
    _execute("student-sample", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--adapter", default=None, type=click.Path(exists=True))
@click.option("--guidance", type=float, default=1.0)
@click.option("--width", type=int, default=32)
@click.option("--height", type=int, default=32)
def variations(config_path, out_root, seed, **options):
    """Image variations from a single visual prompt."""
    _execute("variations", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--images", required=True, multiple=True, type=click.Path(exists=True))
@click.option("--weights", multiple=True, type=float)
@click.option("--adapter", default=None, type=click.Path(exists=True))
@click.option("--guidance", type=float, default=1.0)
@click.option("--width", type=int, default=32)
@click.option("--height", type=int, default=32)
def fuse(config_path, out_root, seed, **options):
    """Weighted fusion of several visual prompts."""
    _execute("fuse", config_path, out_root, seed, **options)


@cli.command("fuse-text")
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--images", required=True, multiple=True, type=click.Path(exists=True))
@click.option("--prompt", required=True)
@click.option("--adapter", default=None, type=click.Path(exists=True))
@click.option("--guidance", type=float, default=1.0)
@click.option("--width", type=int, default=32)
@click.option("--height", type=int, default=32)
def fuse_text(config_path, out_root, seed, **options):
    """Joint image + text conditioning."""
    _execute("fuse-text", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--prompt", default=None)
@click.option("--branch", default=None, type=click.Path(exists=True),
              help="Trained control-branch checkpoint; fresh branch when omitted.")
@click.option("--detector", default="gradient")
@click.option("--guidance", type=float, default=4.0)
def control(config_path, out_root, seed, **options):
    """Edge-conditioned generation through the control branch."""
    _execute("control", config_path, out_root, seed, **options)


@cli.command()
@common_options
@seed_option
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--trajectory", default=None, type=click.Path(exists=True),
              help="JSON trajectory; default is a linear pan.")
@click.option("--dx", type=float, default=0.25)
@click.option("--frames", type=int, default=None)
@click.option("--fps", type=int, default=24)
@click.option("--strength", type=float, default=0.0)
@click.option("--student", default=None, type=click.Path(),
              help="Student checkpoint used as the per-frame refiner.")
@click.option("--prompt", default=None)
@click.option("--depth", default="luma")
def animate(config_path, out_root, seed, **options):
    """Depth-parallax animation from a single image."""
    _execute("animate", config_path, out_root, seed, **options)


@cli.command()
@common_options
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--aesthetic", type=float, default=0.0)
@click.option("--watermark", type=float, default=0.0)
@click.option("--clip-sim", type=float, default=0.0)
def datafilter(config_path, out_root, **options):
    """Score records and apply the filter chain."""
    _execute("datafilter", config_path, out_root, None, **options)


@cli.command("dedup")
@common_options
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--threshold", type=int, default=None)
def dedup_cmd(config_path, out_root, **options):
    """Perceptual-hash near-duplicate removal."""
    _execute("dedup", config_path, out_root, None, **options)


@cli.command("beautify")
@common_options
@click.option("--prompt", required=True)
@click.option("--endpoint", default=None)
def beautify_cmd(config_path, out_root, **options):
    """Expand a prompt through the completion endpoint (falls back safely)."""
    _execute("beautify", config_path, out_root, None, **options)


@cli.command()
@common_options
@click.option("--scale", type=float, default=1.0)
def curriculum(config_path, out_root, **options):
    """Emit the staged-resolution training plan, scaled to desk size."""
    _execute("curriculum", config_path, out_root, None, **options)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except (ConfigError, UsageError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DependencyError as exc:
        click.echo(f"dependency error: {exc}", err=True)
        return EXIT_DEPENDENCY
    except (DivergenceError, IntegrityError) as exc:
        click.echo(f"run failed: {exc}", err=True)
        return EXIT_INTEGRITY
    except click.exceptions.Abort:
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
