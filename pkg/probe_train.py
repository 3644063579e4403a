"""Throwaway probe: tune toy training for caption consistency. Not shipped."""
import sys
import time

import numpy as np
import torch

from latentforge.autoencoder import IdentityCodec
from latentforge.conditioning import EncoderSpec
from latentforge.datapipe import read_manifest
from latentforge.pipeline import Pipeline
from latentforge.schedule import make_schedule
from latentforge.toydata import CLASSES, caption_consistency, make_shapes_corpus, oracle_accuracy, train_oracle
from latentforge.train import TrainConfig, train_base
from latentforge.unet import UNetConfig, param_count

t0 = time.time()
root = "/tmp/probe_corpus"
manifest = make_shapes_corpus(root, n=320, size=32, seed=0)
records = read_manifest(manifest)
print(f"[{time.time()-t0:.0f}s] corpus ready: {len(records)} records")

oracle = train_oracle(size=32, steps=300, seed=1)
acc = oracle_accuracy(oracle)
print(f"[{time.time()-t0:.0f}s] oracle accuracy on held-out renders: {acc:.3f}")

unet_cfg = UNetConfig(
    base_channels=32, level_multipliers=(1, 2), blocks_per_level=1,
    bottleneck_ratio=0.5, attention_levels=(1,), context_dim=32, heads=2,
    time_embed_dim=64,
)
print("params:", param_count(unet_cfg).total)
sched = make_schedule(64, 1e-3, 0.15, "linear")
enc = EncoderSpec(kind="toy-transformer", context_dim=32, seed=0)
codec = IdentityCodec()

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
cfg = TrainConfig(steps=steps, batch_size=32, lr=2e-3, cond_dropout=0.1, seed=0)
model = train_base(records, root, unet_cfg, sched, cfg, codec, enc)
print(f"[{time.time()-t0:.0f}s] trained {steps} steps")

pipe = Pipeline(model, codec, sched, enc)

def generate(prompt, seed):
    return pipe.text_to_image(prompt, seed, 32, 32, guidance_scale=4.0,
                              timesteps=list(np.linspace(63, 0, 12).round().astype(int)))

seeds = list(range(7))  # 8 classes x 7 seeds = 56 generations
score = caption_consistency(generate, oracle, CLASSES, seeds)
print(f"[{time.time()-t0:.0f}s] caption consistency: {score:.3f}")
