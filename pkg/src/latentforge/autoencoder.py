"""Latent codecs standing in for a full image autoencoder.

Images are float32 arrays (H, W, 3) in [0, 1] throughout the framework;
latents are torch tensors (B, 4, h, w).  ``IdentityCodec`` pads RGB with a
zero channel — an exact, parameter-free round trip, which keeps
reconstruction tolerances trivial in tests.  ``ConvCodec`` is a small
trainable alternative with a stride-2 bottleneck.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H,W,3) image, got {getattr(image, 'shape', None)}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    if t.dim() != 4 or t.shape[0] != 1:
        raise ShapeError(f"expected (1,3,H,W) tensor, got {tuple(t.shape)}")
    return t[0].detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


class IdentityCodec:
    """Exact latent codec: RGB channels pass through untouched plus a zero
    fourth channel.  Latents stay in the image's [0,1] frame so the round
    trip is bit-exact (no affine rescale, which would cost a ulp)."""

    latent_channels = 4
    downscale = 1
    roundtrip_mse = 0.0

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        pad = torch.zeros(images.shape[0], 1, images.shape[2], images.shape[3],
                          dtype=images.dtype, device=images.device)
        return torch.cat([images, pad], dim=1)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.dim() != 4 or latents.shape[1] != 4:
            raise ShapeError(f"expected (B,4,h,w) latents, got {tuple(latents.shape)}")
        return latents[:, :3].clamp(0.0, 1.0)

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.encode(image_to_tensor(image))

    def decode_image(self, latents: torch.Tensor) -> np.ndarray:
        return tensor_to_image(self.decode(latents))


class ConvCodec(nn.Module):
    """Small trainable autoencoder: (B,3,H,W) <-> (B,4,H/2,W/2)."""

    latent_channels = 4
    downscale = 2

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 4, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(4, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden, 3, 3, padding=1),
            nn.Sigmoid(),
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents)

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            return self.encode(image_to_tensor(image))

    def decode_image(self, latents: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return tensor_to_image(self.decode(latents))
