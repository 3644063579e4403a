"""Dataset ingestion, filtering, perceptual-hash dedup and the training
curriculum.

Manifests are JSONL: one UTF-8 JSON object per line with the record's id,
image path (relative to the manifest), caption, dimensions, filter scores
and perceptual hash.  Scoring is per-record and side-effect free; dedup is
a serial union-find reduce over the scored stream.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.fft import dctn

from .errors import ConfigError

# -- records ----------------------------------------------------------------


@dataclass
class DatasetRecord:
    id: str
    image_path: str
    caption: str
    width: int = 0
    height: int = 0
    scores: dict = field(default_factory=dict)
    phash: Optional[int] = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["phash"] is not None:
            d["phash"] = format(d["phash"], "016x")
        return json.dumps(d, ensure_ascii=False)

    @staticmethod
    def from_json(line: str) -> "DatasetRecord":
        d = json.loads(line)
        if d.get("phash") is not None:
            d["phash"] = int(d["phash"], 16)
        return DatasetRecord(**d)


def write_manifest(records: Iterable[DatasetRecord], path: Path) -> Path:
    path = Path(path)
    seen = set()
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            if r.id in seen:
                raise ConfigError(f"duplicate record id {r.id!r} in manifest")
            seen.add(r.id)
            f.write(r.to_json() + "\n")
    return path


def read_manifest(path: Path) -> list:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(DatasetRecord.from_json(line))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"manifest {path} contains duplicate ids")
    return records


def reroot_records(records: list, old_root: Path, new_root: Path) -> list:
    """Rewrite image paths so a manifest emitted under ``new_root`` still
    resolves images stored under ``old_root``."""
    import os

    out = []
    for r in records:
        moved = DatasetRecord(**{**asdict(r)})
        moved.image_path = os.path.relpath(Path(old_root) / r.image_path, new_root)
        out.append(moved)
    return out


def load_record_image(record: DatasetRecord, root: Path) -> np.ndarray:
    """Decode the record's image to float32 (H,W,3) in [0,1]."""
    file = Path(root) / record.image_path
    try:
        with Image.open(file) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # noqa: BLE001 - quarantine undecodable records
        raise ConfigError(f"record {record.id!r}: cannot decode image {file}: {exc}") from exc
    return arr


# -- perceptual hash -----------------------------------------------------------

PHASH_BITS = 64


def _to_gray32(image: np.ndarray) -> np.ndarray:
    gray = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    pil = Image.fromarray(np.clip(gray * 255.0, 0, 255).astype(np.uint8), mode="L")
    return np.asarray(pil.resize((32, 32), Image.Resampling.LANCZOS), dtype=np.float64)


def phash(image: np.ndarray) -> int:
    """DCT perceptual hash: 32x32 gray, 2-D DCT, top-left 8x8 block
    thresholded at the median of its 63 non-DC coefficients."""
    small = _to_gray32(image)
    coeffs = dctn(small, norm="ortho")[:8, :8]
    flat = coeffs.ravel()
    median = np.median(flat[1:])  # DC excluded from the threshold
    bits = flat > median
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def score_phashes(records: list, root: Path) -> list:
    for r in records:
        if r.phash is None:
            r.phash = phash(load_record_image(r, root))
    return records


# -- dedup ----------------------------------------------------------------------

DEFAULT_DEDUP_THRESHOLD = 8


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def dedup(records: list, threshold: int = DEFAULT_DEDUP_THRESHOLD) -> list:
    """One representative (lowest id) per connected near-duplicate component.

    Components are built over pairs with Hamming(phash) <= threshold.
    """
    missing = [r.id for r in records if r.phash is None]
    if missing:
        raise ConfigError(
            f"dedup requires phash on every record; missing on {missing[:3]} "
            "(run score_phashes first)"
        )
    n = len(records)
    uf = _UnionFind(n)
    hashes = [r.phash for r in records]
    for i in range(n):
        for j in range(i + 1, n):
            if hamming(hashes[i], hashes[j]) <= threshold:
                uf.union(i, j)
    best: dict = {}
    for i, r in enumerate(records):
        root = uf.find(i)
        if root not in best or r.id < records[best[root]].id:
            best[root] = i
    keep = sorted(best.values())
    return [records[i] for i in keep]


# -- toy scorers -----------------------------------------------------------------


def aesthetic_score(image: np.ndarray) -> float:
    """Sharpness + colorfulness heuristic squashed into [0, 1).

    A stand-in for a learned aesthetic predictor; the external-encoder
    interface accepts a real one.
    """
    gray = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    sharpness = float(ndimage.laplace(gray).var())
    colorfulness = float(image.std(axis=(0, 1)).mean())
    return 1.0 - math.exp(-(20.0 * sharpness + 3.0 * colorfulness))


def watermark_score(image: np.ndarray) -> float:
    """Stub watermark probability: always 0 (no detector at desk scale)."""
    return 0.0


_COLOR_TARGETS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}

_SHAPE_ROUNDNESS = {"circle": 1.0, "square": 0.0, "disk": 1.0, "box": 0.0}


def _image_features(image: np.ndarray) -> np.ndarray:
    # foreground = pixels brighter than the median; its mean color + roundness
    luma = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    fg = luma > max(float(np.median(luma)), 0.05)
    if fg.sum() < 4:
        fg = np.ones_like(fg)
    color = image[fg].mean(axis=0)
    area = float(fg.sum())
    perimeter = float(np.abs(np.diff(fg.astype(np.int8), axis=0)).sum()
                      + np.abs(np.diff(fg.astype(np.int8), axis=1)).sum())
    roundness = 4 * math.pi * area / (perimeter**2) if perimeter > 0 else 0.0
    return np.array([*color, min(roundness, 1.5)])


def _caption_features(caption: str) -> np.ndarray:
    words = caption.lower().split()
    color = next((np.array(_COLOR_TARGETS[w]) for w in words if w in _COLOR_TARGETS),
                 np.array([0.5, 0.5, 0.5]))
    roundness = next((_SHAPE_ROUNDNESS[w] for w in words if w in _SHAPE_ROUNDNESS), 0.5)
    return np.array([*color, roundness])


def clip_similarity(image: np.ndarray, caption: str) -> float:
    """Toy joint-encoder cosine between image and caption features."""
    a = _image_features(image)
    b = _caption_features(caption)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-9 or nb < 1e-9:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


SCORERS: dict = {
    "aesthetic": lambda image, caption: aesthetic_score(image),
    "watermark": lambda image, caption: watermark_score(image),
    "clip_sim": lambda image, caption: clip_similarity(image, caption),
}


def score_records(records: list, root: Path, names: Iterable[str] = ("aesthetic", "watermark", "clip_sim")) -> list:
    for name in names:
        if name not in SCORERS:
            raise ConfigError(f"unknown scorer {name!r}")
    for r in records:
        image = load_record_image(r, root)
        for name in names:
            r.scores[name] = SCORERS[name](image, r.caption)
    return records


# -- filtering -------------------------------------------------------------------


@dataclass(frozen=True)
class FilterRule:
    """Threshold on one score; watermark keeps LOW scores, others keep HIGH."""

    name: str
    threshold: float

    def passes(self, record: DatasetRecord) -> bool:
        score = record.scores.get(self.name)
        if score is None:
            raise ConfigError(f"record {record.id!r} has no {self.name!r} score")
        if self.name == "watermark":
            return score <= 1.0 - self.threshold
        return score >= self.threshold


@dataclass
class Rejection:
    record: DatasetRecord
    reason: str
    score: float


def filter_records(records: list, chain: list) -> tuple:
    """Apply threshold rules in order; first failing rule names the reason."""
    for rule in chain:
        if rule.name not in SCORERS:
            raise ConfigError(f"unknown filter name {rule.name!r}")
    kept, rejected = [], []
    for r in records:
        verdict = None
        for rule in chain:
            if not rule.passes(r):
                verdict = Rejection(r, rule.name, r.scores[rule.name])
                break
        if verdict is None:
            kept.append(r)
        else:
            rejected.append(verdict)
    return kept, rejected


def strict_profile(base: list, aesthetic_boost: float = 0.2) -> list:
    """Second-category profile: same chain with a stricter aesthetic bar."""
    return [FilterRule(r.name, min(r.threshold + aesthetic_boost, 1.0))
            if r.name == "aesthetic" else r for r in base]


# -- curriculum ------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumStage:
    resolution: int       # fixed edge, or the mixed-range minimum
    resolution_max: Optional[int]  # None for fixed stages
    pair_budget: int
    batch_size: int
    step_budget: int

    @property
    def mixed(self) -> bool:
        return self.resolution_max is not None


# Full-scale staged plan: resolutions 256/384/512/768 then mixed 768..1024,
# pair budgets 1.1B/768M/450M/224M/280M, batches 20/10/10/4/1.
FULL_SCALE_STAGES = (
    CurriculumStage(256, None, 1_100_000_000, 20, 600_000),
    CurriculumStage(384, None, 768_000_000, 10, 500_000),
    CurriculumStage(512, None, 450_000_000, 10, 400_000),
    CurriculumStage(768, None, 224_000_000, 4, 250_000),
    CurriculumStage(768, 1024, 280_000_000, 1, 350_000),
)


def build_curriculum(stages: tuple = FULL_SCALE_STAGES, scale_factor: float = 1.0) -> list:
    """Scale the staged plan to desk size: resolutions to multiples of 8,
    pair/step budgets proportionally, batch sizes unchanged."""
    if not 0.0 < scale_factor <= 1.0:
        raise ConfigError(f"scale_factor must be in (0, 1], got {scale_factor}")

    def scale_res(r: int) -> int:
        scaled = int(round(r * scale_factor / 8.0)) * 8
        if scaled < 16:
            raise ConfigError(
                f"resolution {r} scaled by {scale_factor} gives {scaled} < 16"
            )
        return scaled

    out = []
    for s in stages:
        out.append(CurriculumStage(
            resolution=scale_res(s.resolution),
            resolution_max=scale_res(s.resolution_max) if s.resolution_max else None,
            pair_budget=max(1, round(s.pair_budget * scale_factor)),
            batch_size=s.batch_size,
            step_budget=max(1, round(s.step_budget * scale_factor)),
        ))
    for a, b in zip(out, out[1:]):
        if b.resolution < a.resolution:
            raise ConfigError("scaled stages must be nondecreasing in resolution")
    return out


# -- safety ----------------------------------------------------------------------


@dataclass
class SafetyPolicy:
    blocklist: tuple = ()
    concepts: tuple = ()  # (name, unit-norm embedding vector) pairs
    similarity_threshold: float = 0.85
    fail_closed: bool = True
    image_scorer: Optional[Callable] = None  # image -> embedding vector


@dataclass
class SafetyVerdict:
    allowed: bool
    reasons: list


def safety_check(text: Optional[str], image: Optional[np.ndarray] = None,
                 policy: Optional[SafetyPolicy] = None) -> SafetyVerdict:
    """Blocklist match on text; concept-similarity match on images."""
    policy = policy or SafetyPolicy()
    reasons = []
    try:
        if text:
            words = set(text.lower().split())
            for token in policy.blocklist:
                if token.lower() in words:
                    reasons.append(f"text:{token}")
        if image is not None and policy.concepts:
            if policy.image_scorer is None:
                from .conditioning import EncoderSpec, encode_image

                emb = encode_image(EncoderSpec(), image).vector.numpy()
            else:
                emb = np.asarray(policy.image_scorer(image), dtype=np.float64)
            norm = np.linalg.norm(emb)
            if norm > 1e-9:
                emb = emb / norm
            for name, concept in policy.concepts:
                c = np.asarray(concept, dtype=np.float64)
                c = c / max(np.linalg.norm(c), 1e-9)
                sim = float(emb @ c)
                if sim >= policy.similarity_threshold:
                    reasons.append(f"image:{name}")
    except Exception as exc:  # noqa: BLE001 - scorer failures fall open/closed
        if policy.fail_closed:
            return SafetyVerdict(False, [f"error:{exc}"])
        return SafetyVerdict(True, [f"error-ignored:{exc}"])
    return SafetyVerdict(allowed=not reasons, reasons=reasons)
