"""Pluggable text and image encoders producing cross-attention context.

The built-in encoders are deliberately tiny and deterministic: token vectors
are derived from stable digests (no vocabulary files), transformer weights
from a seeded generator, and every parameter is frozen.  Real encoders can
be slotted in through the external HTTP client at the bottom.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, DependencyError, ShapeError

log = logging.getLogger(__name__)

MAX_PROMPT_CHARS = 1000

ENCODER_KINDS = ("toy-transformer", "hash-embedding", "external")


@dataclass
class ContextEmbedding:
    """Token sequence for cross-attention: (batch, length, dim) + bool mask."""

    tokens: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise ShapeError(f"tokens must be (B,L,D), got {tuple(self.tokens.shape)}")
        if self.mask.shape != self.tokens.shape[:2]:
            raise ShapeError(
                f"mask shape {tuple(self.mask.shape)} != token prefix {tuple(self.tokens.shape[:2])}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class VisualEmbedding:
    vector: torch.Tensor  # (dim,)

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "toy-transformer"
    context_dim: int = 64
    visual_dim: int = 64
    max_length: int = 32
    max_chars: int = MAX_PROMPT_CHARS
    seed: int = 0
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}, expected one of {ENCODER_KINDS}")
        if self.kind == "external" and not self.endpoint:
            raise ConfigError("external encoder requires an endpoint")


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Stable per-token vector: digest of the token seeds a local generator."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng([seed, int.from_bytes(digest, "little")])
    return rng.standard_normal(dim).astype(np.float32) / np.sqrt(dim)


def _positional(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2 * i / dim)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class _ToyTransformer:
    """Two frozen self-attention + FFN layers over hashed token vectors."""

    def __init__(self, dim: int, seed: int, layers: int = 2, heads: int = 2):
        rng = np.random.default_rng([seed, 0xC0DE])
        scale = 1.0 / np.sqrt(dim)
        self.heads = heads
        self.dim = dim
        self.layers = []
        for _ in range(layers):
            w = {
                name: (rng.standard_normal((dim, dim)) * scale).astype(np.float32)
                for name in ("q", "k", "v", "o", "f1", "f2")
            }
            self.layers.append(w)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = self.heads
        L, d = x.shape
        dh = d // h
        for w in self.layers:
            q = (x @ w["q"]).reshape(L, h, dh).transpose(1, 0, 2)
            k = (x @ w["k"]).reshape(L, h, dh).transpose(1, 0, 2)
            v = (x @ w["v"]).reshape(L, h, dh).transpose(1, 0, 2)
            logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
            logits -= logits.max(axis=-1, keepdims=True)
            att = np.exp(logits)
            att /= att.sum(axis=-1, keepdims=True)
            out = (att @ v).transpose(1, 0, 2).reshape(L, d) @ w["o"]
            x = x + out
            x = x + np.maximum(x @ w["f1"], 0.0) @ w["f2"]
        return x


class TextEncoder:
    """Deterministic frozen text encoder with a thread-safe embedding cache."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self._transformer = (
            _ToyTransformer(spec.context_dim, spec.seed) if spec.kind == "toy-transformer" else None
        )
        self._cache: dict = {}
        self._lock = threading.Lock()

    def encode(self, text: str) -> ContextEmbedding:
        if text.strip() == "":
            raise ConfigError("prompt is empty after trimming")
        if len(text) > self.spec.max_chars:
            log.warning(
                "prompt truncated from %d to %d characters", len(text), self.spec.max_chars
            )
            text = text[: self.spec.max_chars]

        cached = self._cache.get(text)
        if cached is not None:
            return ContextEmbedding(cached[0].clone(), cached[1].clone())

        arr = self._embed(text)
        tokens = torch.from_numpy(arr)[None]  # (1, L, D)
        mask = torch.ones(1, arr.shape[0], dtype=torch.bool)
        with self._lock:
            self._cache[text] = (tokens, mask)
        return ContextEmbedding(tokens.clone(), mask.clone())

    def encode_batch(self, texts: list) -> ContextEmbedding:
        """Pad a batch of prompts to a common length with masked zeros."""
        singles = [self.encode(t) for t in texts]
        L = max(s.tokens.shape[1] for s in singles)
        d = self.spec.context_dim
        tokens = torch.zeros(len(texts), L, d)
        mask = torch.zeros(len(texts), L, dtype=torch.bool)
        for i, s in enumerate(singles):
            n = s.tokens.shape[1]
            tokens[i, :n] = s.tokens[0]
            mask[i, :n] = True
        return ContextEmbedding(tokens, mask)

    def _embed(self, text: str) -> np.ndarray:
        words = text.split()[: self.spec.max_length]
        d = self.spec.context_dim
        if self.spec.kind == "external":
            return _fetch_external_embedding(self.spec, text)
        base = np.stack([_token_vector(w, d, self.spec.seed) for w in words])
        base = base + _positional(len(words), d)
        if self.spec.kind == "hash-embedding":
            return base.astype(np.float32)
        return self._transformer(base).astype(np.float32)


def encode_text(spec: EncoderSpec, text: str) -> ContextEmbedding:
    return _encoder_for(spec).encode(text)


_ENCODERS: dict = {}
_ENCODERS_LOCK = threading.Lock()


def _encoder_for(spec: EncoderSpec) -> TextEncoder:
    with _ENCODERS_LOCK:
        enc = _ENCODERS.get(spec)
        if enc is None:
            enc = TextEncoder(spec)
            _ENCODERS[spec] = enc
        return enc


def null_context(spec: EncoderSpec) -> ContextEmbedding:
    """Length-1 zero embedding used as the unconditional branch."""
    tokens = torch.zeros(1, 1, spec.context_dim)
    mask = torch.ones(1, 1, dtype=torch.bool)
    return ContextEmbedding(tokens, mask)


def drop_context(ctx: ContextEmbedding, p: float, rng_seed: int) -> ContextEmbedding:
    """Replace each batch row by the null embedding with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must be in [0,1], got {p}")
    if p == 0.0:
        return ContextEmbedding(ctx.tokens.clone(), ctx.mask.clone())
    rng = np.random.default_rng(rng_seed)
    tokens = ctx.tokens.clone()
    mask = ctx.mask.clone()
    for b in range(tokens.shape[0]):
        if p == 1.0 or rng.random() < p:
            tokens[b] = 0.0
            mask[b] = False
            mask[b, 0] = True
    return ContextEmbedding(tokens, mask)


# -- images -----------------------------------------------------------------


def _pool_grid(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """Average-pool an (H,W,3) image onto a grid x grid x 3 patch summary."""
    h, w = image.shape[:2]
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    out = np.zeros((grid, grid, 3), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            cell = image[ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
            out[i, j] = cell.reshape(-1, 3).mean(axis=0)
    return out


class VisualEncoder:
    """Toy image encoder: pooled color grid through a fixed random projection.

    Pooling makes it tolerant to one-pixel shifts (cosine stays high), which
    is all the adapter pipelines need at desk scale.
    """

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0x1317])
        self.proj = (rng.standard_normal((8 * 8 * 3, spec.visual_dim)) / np.sqrt(8 * 8 * 3)).astype(
            np.float32
        )

    def encode(self, image: np.ndarray) -> VisualEmbedding:
        if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
            raise ConfigError(f"image must be an (H,W,3) array, got {getattr(image, 'shape', None)}")
        if not np.isfinite(image).all():
            raise ConfigError("image contains non-finite values")
        flat = _pool_grid(image.astype(np.float64)).reshape(-1).astype(np.float32)
        vec = torch.from_numpy(flat @ self.proj)
        norm = float(vec.norm())
        if norm > 1e-8:
            vec = vec / norm
        return VisualEmbedding(vec)


def encode_image(spec: EncoderSpec, image: np.ndarray) -> VisualEmbedding:
    return _visual_encoder_for(spec).encode(image)


_VISUAL_ENCODERS: dict = {}


def _visual_encoder_for(spec: EncoderSpec) -> VisualEncoder:
    with _ENCODERS_LOCK:
        enc = _VISUAL_ENCODERS.get(spec)
        if enc is None:
            enc = VisualEncoder(spec)
            _VISUAL_ENCODERS[spec] = enc
        return enc


# -- external endpoint --------------------------------------------------------


def _fetch_external_embedding(spec: EncoderSpec, text: str) -> np.ndarray:
    """POST {"text": ...} -> {"data": [floats], "shape": [L, D]}."""
    import requests

    try:
        resp = requests.post(spec.endpoint, json={"text": text}, timeout=10.0)
        resp.raise_for_status()
        payload = resp.json()
        arr = np.asarray(payload["data"], dtype=np.float32).reshape(payload["shape"])
    except Exception as exc:  # noqa: BLE001 - always surface as a dependency failure
        raise DependencyError(f"external encoder at {spec.endpoint} failed: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != spec.context_dim:
        raise DependencyError(
            f"external encoder returned shape {arr.shape}, expected (L, {spec.context_dim})"
        )
    return arr
