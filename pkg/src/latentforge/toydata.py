"""Synthetic 8-class shapes corpus and an independently trained oracle
classifier used to judge caption consistency of generated images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .checkpoint import load_tensors, save_tensors
from .datapipe import DatasetRecord, write_manifest
from .errors import ConfigError

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.12, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
}
SHAPES = ("circle", "square")
CLASSES = tuple(f"{color} {shape}" for color in COLORS for shape in SHAPES)
BACKGROUND = 0.06


def render_shape(color: str, shape: str, size: int = 32,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One centered shape with small position/size jitter."""
    if color not in COLORS or shape not in SHAPES:
        raise ConfigError(f"unknown class {color!r} {shape!r}")
    rng = rng or np.random.default_rng(0)
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    c = size / 2 + rng.uniform(-size / 16, size / 16, size=2)
    half = size * rng.uniform(0.24, 0.32)
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        mask = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= half**2
    else:
        mask = (np.abs(yy - c[0]) <= half) & (np.abs(xx - c[1]) <= half)
    img[mask] = COLORS[color]
    return img


def make_shapes_corpus(root: Path, n: int, size: int = 32, seed: int = 0) -> Path:
    """Write n PNGs + manifest.jsonl under root; captions are the class names."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        caption = CLASSES[i % len(CLASSES)]
        color, shape = caption.split()
        img = render_shape(color, shape, size, rng)
        name = f"img_{i:05d}.png"
        Image.fromarray((img * 255).astype(np.uint8)).save(root / name)
        records.append(DatasetRecord(id=f"img_{i:05d}", image_path=name,
                                     caption=caption, width=size, height=size))
    return write_manifest(records, root / "manifest.jsonl")


class OracleClassifier(nn.Module):
    """Small CNN over the 8 shape classes; trained separately from and never
    sharing weights with any generator."""

    def __init__(self, size: int = 32):
        super().__init__()
        self.size = size
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.fc = nn.Linear(32, len(CLASSES))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))

    def classify(self, image: np.ndarray) -> str:
        x = torch.from_numpy(image.transpose(2, 0, 1))[None].float()
        with torch.no_grad():
            logits = self(x)
        return CLASSES[int(logits.argmax())]

    def feature_vector(self, image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(image.transpose(2, 0, 1))[None].float()
        with torch.no_grad():
            return self.features(x)[0].numpy()


def train_oracle(size: int = 32, steps: int = 400, batch: int = 64,
                 seed: int = 0, noise: float = 0.05) -> OracleClassifier:
    """Train the oracle on freshly rendered shapes with light noise
    augmentation so it tolerates generator artifacts."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = OracleClassifier(size)
        opt = torch.optim.Adam(model.parameters(), lr=2e-3)
        rng = np.random.default_rng(seed)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            labels = rng.integers(0, len(CLASSES), size=batch)
            imgs = np.stack([
                render_shape(*CLASSES[k].split(), size=size, rng=rng) for k in labels
            ])
            x = torch.from_numpy(imgs.transpose(0, 3, 1, 2)).float()
            x = x + noise * torch.randn(x.shape, generator=gen)
            y = torch.from_numpy(labels).long()
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def oracle_accuracy(model: OracleClassifier, n: int = 200, seed: int = 123) -> float:
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        caption = CLASSES[i % len(CLASSES)]
        img = render_shape(*caption.split(), size=model.size, rng=rng)
        hits += model.classify(img) == caption
    return hits / n


def save_oracle(model: OracleClassifier, path: Path) -> None:
    save_tensors(dict(model.state_dict()), path, config={"size": model.size},
                 meta={"kind": "oracle-classifier"})


def load_oracle(path: Path) -> OracleClassifier:
    state, manifest = load_tensors(path)
    model = OracleClassifier(manifest["config"]["size"])
    model.load_state_dict(state)
    model.eval()
    return model


def caption_consistency(generate, oracle: OracleClassifier, prompts, seeds) -> float:
    """Fraction of (prompt, seed) generations the oracle labels as the prompt.

    ``generate(prompt, seed) -> image``; prompts must be class names.
    """
    hits = 0
    total = 0
    for prompt in prompts:
        for seed in seeds:
            image = generate(prompt, seed)
            hits += oracle.classify(image) == prompt
            total += 1
    return hits / total
