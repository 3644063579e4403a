import numpy as np
import pytest
import torch

from latentforge.autoencoder import ConvCodec, IdentityCodec, image_to_tensor, tensor_to_image
from latentforge.checkpoint import load_tensors, load_unet, save_tensors, save_unet
from latentforge.errors import ConfigError, IntegrityError
from latentforge.unet import UNetConfig, build_unet

TINY = UNetConfig(base_channels=8, level_multipliers=(1, 2), blocks_per_level=1,
                  attention_levels=(1,), context_dim=16, heads=2, time_embed_dim=16)


def test_identity_codec_exact_round_trip():
    rng = np.random.default_rng(0)
    image = rng.random((16, 16, 3)).astype(np.float32)
    codec = IdentityCodec()
    back = codec.decode_image(codec.encode_image(image))
    np.testing.assert_array_equal(back, image)


def test_identity_codec_latent_is_four_channel():
    codec = IdentityCodec()
    z = codec.encode(torch.rand(2, 3, 8, 8))
    assert z.shape == (2, 4, 8, 8)
    assert z.min() >= 0.0 and z.max() <= 1.0


def test_conv_codec_shapes():
    codec = ConvCodec()
    z = codec.encode(torch.rand(1, 3, 16, 16))
    assert z.shape == (1, 4, 8, 8)
    assert codec.decode(z).shape == (1, 3, 16, 16)


def test_image_tensor_round_trip():
    rng = np.random.default_rng(1)
    image = rng.random((8, 12, 3)).astype(np.float32)
    np.testing.assert_array_equal(tensor_to_image(image_to_tensor(image)), image)


def test_save_load_unet_bit_exact(tmp_path):
    model = build_unet(TINY, seed=0)
    save_unet(model, tmp_path / "ckpt", step=10, seed=3)
    loaded, manifest = load_unet(tmp_path / "ckpt")
    assert manifest["meta"]["step"] == 10 and manifest["meta"]["seed"] == 3
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2
        assert torch.equal(p1, p2)


def test_load_with_mismatched_in_channels_names_field(tmp_path):
    model = build_unet(TINY, seed=0)
    save_unet(model, tmp_path / "ckpt")
    with pytest.raises(ConfigError) as exc:
        load_unet(tmp_path / "ckpt", expect_in_channels=9)
    assert "in_channels" in str(exc.value)


def test_truncated_blob_fails_checksum(tmp_path):
    model = build_unet(TINY, seed=0)
    save_unet(model, tmp_path / "ckpt")
    blob = tmp_path / "ckpt" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-16])
    with pytest.raises(IntegrityError):
        load_unet(tmp_path / "ckpt")


def test_corrupted_byte_fails_checksum(tmp_path):
    state = {"w": torch.arange(16, dtype=torch.float32).reshape(4, 4)}
    save_tensors(state, tmp_path / "t")
    blob = tmp_path / "t" / "tensors.bin"
    raw = bytearray(blob.read_bytes())
    raw[5] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_tensors(tmp_path / "t")


def test_generic_tensor_round_trip(tmp_path):
    state = {
        "a": torch.randn(3, 5, generator=torch.Generator().manual_seed(0)),
        "b": torch.arange(7, dtype=torch.int64),
    }
    save_tensors(state, tmp_path / "t", config={"kind": "misc"}, meta={"step": 1})
    loaded, manifest = load_tensors(tmp_path / "t")
    assert manifest["config"]["kind"] == "misc"
    assert torch.equal(loaded["a"], state["a"])
    assert torch.equal(loaded["b"], state["b"])


def test_missing_checkpoint_is_integrity_error(tmp_path):
    with pytest.raises(IntegrityError):
        load_tensors(tmp_path / "missing")
