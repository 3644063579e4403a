"""Run orchestration: global config, run manifests, command dispatch.

Every command executes inside a fresh run directory written atomically
(temp-then-rename), with a manifest recording the command, a hash of the
effective config, the seed, code revision, timings, inputs and artifacts.
Reruns of deterministic commands with identical manifest inputs reproduce
identical artifact bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .errors import ConfigError, UsageError

MAX_RESOLUTION = 1024
ASPECT_RATIOS = ("1:1", "2:3", "3:2", "16:9", "9:16")


@dataclass
class GlobalConfig:
    """Declarative run configuration; CLI flags override config keys."""

    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {
        "T": 64, "kind": "linear", "beta_min": 1e-3, "beta_max": 0.15})
    encoder: dict = field(default_factory=lambda: {
        "kind": "toy-transformer", "context_dim": 32})
    max_resolution: int = MAX_RESOLUTION
    allowed_aspect_ratios: tuple = ASPECT_RATIOS
    out_root: str = "runs"
    beautify_endpoint: Optional[str] = None

    @staticmethod
    def load(path: Optional[Path] = None, overrides: Optional[dict] = None) -> "GlobalConfig":
        data: dict = {}
        if path is not None:
            raw = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            data.update(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        known = {f.name for f in dataclasses.fields(GlobalConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "allowed_aspect_ratios" in data:
            data["allowed_aspect_ratios"] = tuple(data["allowed_aspect_ratios"])
        cfg = GlobalConfig(**data)
        if cfg.beautify_endpoint is None:
            cfg.beautify_endpoint = os.environ.get("LATENTFORGE_BEAUTIFY_ENDPOINT")
        return cfg

    def validate_resolution(self, width: int, height: int) -> None:
        if width > self.max_resolution or height > self.max_resolution:
            raise ConfigError(
                f"requested resolution {width}x{height} exceeds the "
                f"max_resolution cap of {self.max_resolution}x{self.max_resolution}"
            )
        if width < 8 or height < 8:
            raise ConfigError(f"resolution {width}x{height} below the 8px minimum")

    def resolve_size(self, aspect: Optional[str], base: int) -> tuple:
        """(width, height) for an aspect ratio at a given short-side base."""
        if aspect is None:
            return base, base
        if aspect not in self.allowed_aspect_ratios:
            raise ConfigError(
                f"aspect ratio {aspect!r} not in allowed set {self.allowed_aspect_ratios}"
            )
        num, den = (int(p) for p in aspect.split(":"))
        if num >= den:
            width, height = base * num // den, base
        else:
            width, height = base, base * den // num
        self.validate_resolution(width, height)
        return width, height

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def code_revision() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        git = rev.stdout.strip() if rev.returncode == 0 else "unknown"
    except Exception:  # noqa: BLE001
        git = "unknown"
    return f"{__version__}+{git}"


@dataclass
class RunManifest:
    id: str
    command: str
    config_hash: str
    seed: Optional[int]
    code_revision: str
    started: float
    finished: float = 0.0
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _linked_run_id(path: Path) -> Optional[str]:
    """Run id of the run that produced an artifact path, when discoverable."""
    p = Path(path).resolve()
    for parent in [p] + list(p.parents):
        manifest = parent / "run.json"
        if manifest.exists():
            try:
                return json.loads(manifest.read_text())["id"]
            except Exception:  # noqa: BLE001
                return None
    return None


class RunContext:
    """Working directory and manifest accumulator handed to a command."""

    def __init__(self, command: str, config: GlobalConfig, seed: Optional[int],
                 run_dir: Path, options: dict):
        self.command = command
        self.config = config
        self.seed = seed
        self.dir = run_dir
        self.options = options
        self.artifacts: dict = {}
        self.metrics: dict = {}
        self.inputs: dict = {}

    def note_input(self, name: str, path) -> Path:
        path = Path(path)
        self.inputs[name] = str(path)
        linked = _linked_run_id(path)
        if linked:
            self.inputs[f"{name}_run"] = linked
        return path

    def artifact_path(self, name: str, filename: str) -> Path:
        path = self.dir / filename
        self.artifacts[name] = str(path)
        return path

    def save_image(self, name: str, filename: str, image: np.ndarray) -> Path:
        path = self.artifact_path(name, filename)
        arr = np.clip(image * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path)
        return path


CommandFn = Callable[[RunContext], None]
COMMANDS: dict = {}


def command(name: str) -> Callable[[CommandFn], CommandFn]:
    def register(fn: CommandFn) -> CommandFn:
        COMMANDS[name] = fn
        return fn

    return register


def run(command_name: str, config: GlobalConfig, seed: Optional[int] = None,
        options: Optional[dict] = None, out_root: Optional[Path] = None) -> RunManifest:
    """Execute a command and persist its manifest + artifacts atomically."""
    if command_name not in COMMANDS:
        raise UsageError(
            f"unknown command {command_name!r}; expected one of {sorted(COMMANDS)}"
        )
    root = Path(out_root or config.out_root)
    root.mkdir(parents=True, exist_ok=True)
    started = time.time()
    run_id = f"{command_name}-{time.strftime('%Y%m%d-%H%M%S')}-{os.urandom(3).hex()}"
    tmp_dir = Path(tempfile.mkdtemp(dir=root, prefix=f".{run_id}-"))
    ctx = RunContext(command_name, config, seed, tmp_dir, dict(options or {}))
    try:
        COMMANDS[command_name](ctx)
        manifest = RunManifest(
            id=run_id,
            command=command_name,
            config_hash=config.hash(),
            seed=seed,
            code_revision=code_revision(),
            started=started,
            finished=time.time(),
            inputs=ctx.inputs,
            artifacts=ctx.artifacts,
            metrics=ctx.metrics,
        )
        final_dir = root / run_id
        # artifacts reference their final location
        manifest.artifacts = {
            k: str(final_dir / Path(v).relative_to(tmp_dir))
            if Path(v).is_relative_to(tmp_dir) else v
            for k, v in manifest.artifacts.items()
        }
        (tmp_dir / "run.json").write_text(manifest.to_json())
        os.replace(tmp_dir, final_dir)
        return manifest
    except BaseException:
        import shutil

        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
