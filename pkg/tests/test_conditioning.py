import hashlib
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import torch

from latentforge.conditioning import (
    EncoderSpec,
    TextEncoder,
    VisualEncoder,
    drop_context,
    encode_image,
    encode_text,
    null_context,
)
from latentforge.errors import ConfigError, DependencyError

SPEC = EncoderSpec(kind="toy-transformer", context_dim=32, max_length=16, seed=0)
HASH_SPEC = EncoderSpec(kind="hash-embedding", context_dim=32, max_length=16, seed=0)


def test_empty_prompt_rejected():
    with pytest.raises(ConfigError):
        encode_text(SPEC, "")
    with pytest.raises(ConfigError):
        encode_text(SPEC, "   ")


def test_same_string_gives_identical_tensors():
    a = encode_text(SPEC, "red circle")
    b = encode_text(SPEC, "red circle")
    assert torch.equal(a.tokens, b.tokens)
    assert torch.equal(a.mask, b.mask)


def test_distinct_strings_differ():
    a = encode_text(SPEC, "red circle")
    b = encode_text(SPEC, "blue square")
    assert not torch.equal(a.tokens, b.tokens)


def test_determinism_across_encoder_instances():
    a = TextEncoder(SPEC).encode("a cat in a hat")
    b = TextEncoder(EncoderSpec(kind="toy-transformer", context_dim=32, max_length=16, seed=0)).encode(
        "a cat in a hat"
    )
    assert torch.equal(a.tokens, b.tokens)


def test_hash_embedding_kind():
    a = encode_text(HASH_SPEC, "one two three")
    assert a.tokens.shape == (1, 3, 32)
    assert torch.equal(a.tokens, encode_text(HASH_SPEC, "one two three").tokens)


def test_token_length_cap():
    text = " ".join(f"w{i}" for i in range(50))
    out = encode_text(SPEC, text)
    assert out.tokens.shape[1] == SPEC.max_length


def test_over_length_prompt_truncated_with_warning(caplog):
    spec = EncoderSpec(kind="hash-embedding", context_dim=16, max_chars=20, seed=0)
    with caplog.at_level(logging.WARNING, logger="latentforge.conditioning"):
        out = encode_text(spec, "x" * 50)
    assert any("truncated" in r.message for r in caplog.records)
    assert out.tokens.shape[1] >= 1


def test_null_context_stable_and_length_one():
    a = null_context(SPEC)
    b = null_context(SPEC)
    assert a.tokens.shape == (1, 1, 32)
    assert torch.equal(a.tokens, b.tokens)
    assert a.tokens.abs().max() == 0


def test_encode_batch_pads_and_masks():
    enc = TextEncoder(SPEC)
    out = enc.encode_batch(["red circle", "a"])
    assert out.tokens.shape[0] == 2
    assert out.mask[0].all()
    assert out.mask[1, 0] and not out.mask[1, 1]


class TestDropContext:
    def _batched(self, n):
        gen = torch.Generator().manual_seed(0)
        tokens = torch.randn(n, 3, 32, generator=gen)
        from latentforge.conditioning import ContextEmbedding

        return ContextEmbedding(tokens, torch.ones(n, 3, dtype=torch.bool))

    def test_p_zero_identity(self):
        ctx = self._batched(4)
        out = drop_context(ctx, 0.0, rng_seed=1)
        assert torch.equal(out.tokens, ctx.tokens)

    def test_p_one_all_null(self):
        ctx = self._batched(4)
        out = drop_context(ctx, 1.0, rng_seed=1)
        assert out.tokens.abs().max() == 0
        assert out.mask[:, 0].all() and not out.mask[:, 1:].any()

    def test_fraction_monte_carlo(self):
        ctx = self._batched(10_000)
        out = drop_context(ctx, 0.1, rng_seed=2)
        dropped = (out.tokens.abs().sum(dim=(1, 2)) == 0).float().mean().item()
        assert abs(dropped - 0.1) < 0.01

    def test_p_out_of_range(self):
        ctx = self._batched(1)
        with pytest.raises(ConfigError):
            drop_context(ctx, 1.5, rng_seed=0)

    def test_reproducible_under_seed(self):
        ctx = self._batched(100)
        a = drop_context(ctx, 0.3, rng_seed=7)
        b = drop_context(ctx, 0.3, rng_seed=7)
        assert torch.equal(a.tokens, b.tokens)


class TestVisualEncoder:
    def _image(self, seed=0, size=64):
        rng = np.random.default_rng(seed)
        return rng.random((size, size, 3)).astype(np.float32)

    def test_identical_images_identical_embeddings(self):
        img = self._image()
        a = encode_image(SPEC, img)
        b = encode_image(SPEC, img.copy())
        assert torch.equal(a.vector, b.vector)

    def test_one_pixel_shift_high_cosine(self):
        # smooth image so pooling keeps the shift small
        y, x = np.mgrid[0:64, 0:64] / 64.0
        img = np.stack([y, x, (x + y) / 2], axis=-1).astype(np.float32)
        shifted = np.roll(img, 1, axis=1)
        a = encode_image(SPEC, img).vector
        b = encode_image(SPEC, shifted).vector
        cos = float((a @ b) / (a.norm() * b.norm()))
        assert cos > 0.9

    def test_zero_image_finite(self):
        out = encode_image(SPEC, np.zeros((32, 32, 3), dtype=np.float32))
        assert torch.isfinite(out.vector).all()

    def test_malformed_image_rejected(self):
        with pytest.raises(ConfigError):
            encode_image(SPEC, np.zeros((32, 32), dtype=np.float32))
        with pytest.raises(ConfigError):
            encode_image(SPEC, np.full((8, 8, 3), np.nan, dtype=np.float32))


def test_encoder_parameters_frozen_across_encodes():
    enc = TextEncoder(SPEC)
    venc = VisualEncoder(SPEC)

    def weight_hash():
        h = hashlib.sha256()
        for layer in enc._transformer.layers:
            for k in sorted(layer):
                h.update(layer[k].tobytes())
        h.update(venc.proj.tobytes())
        return h.hexdigest()

    before = weight_hash()
    enc.encode("red circle")
    enc.encode("blue square on a table")
    venc.encode(np.random.default_rng(0).random((16, 16, 3)).astype(np.float32))
    assert weight_hash() == before


class _EncoderHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        n = int(self.headers["Content-Length"])
        json.loads(self.rfile.read(n))
        arr = np.arange(2 * 32, dtype=np.float32).reshape(2, 32) / 64.0
        body = json.dumps({"data": arr.ravel().tolist(), "shape": [2, 32]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def encoder_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _EncoderHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/encode"
    server.shutdown()


def test_external_encoder_round_trip(encoder_server):
    spec = EncoderSpec(kind="external", context_dim=32, endpoint=encoder_server)
    out = encode_text(spec, "anything")
    assert out.tokens.shape == (1, 2, 32)
    assert out.tokens[0, 1, 0].item() == pytest.approx(32 / 64.0)


def test_external_encoder_unavailable_is_dependency_error():
    spec = EncoderSpec(kind="external", context_dim=32, endpoint="http://127.0.0.1:9/nope")
    with pytest.raises(DependencyError):
        encode_text(spec, "anything")


def test_external_encoder_requires_endpoint():
    with pytest.raises(ConfigError):
        EncoderSpec(kind="external", context_dim=32)
