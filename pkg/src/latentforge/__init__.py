"""latentforge: a desk-scale latent diffusion studio.

Text-to-image core (schedules, samplers, guidance, a bottlenecked residual
U-Net) plus the surrounding toolkit: adversarial few-step distillation with
a refiner, GLIDE-style in/outpainting, image-prompt adapters with an
edge-conditioned control branch, depth-parallax animation, a dataset
filtering pipeline and a prompt beautifier, all behind one CLI.
"""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, make_schedule, student_schedule  # noqa: F401
from .diffusion import (  # noqa: F401
    GuidanceSpec,
    SampleTrace,
    cfg_combine,
    forward_sample,
    noise_to_step,
    sampler_step,
)
from .unet import UNet, UNetConfig, build_unet, denoise, param_count  # noqa: F401
from .conditioning import (  # noqa: F401
    ContextEmbedding,
    EncoderSpec,
    VisualEmbedding,
    drop_context,
    encode_image,
    encode_text,
    null_context,
)
from .autoencoder import ConvCodec, IdentityCodec  # noqa: F401
from .pipeline import Pipeline  # noqa: F401
