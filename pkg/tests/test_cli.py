import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from latentforge.checkpoint import save_unet
from latentforge.cli import main
from latentforge.errors import ConfigError, UsageError
from latentforge.inpaint import expand_input_conv, generate_masks, save_mask_png
from latentforge.runs import COMMANDS, GlobalConfig, run
from latentforge.toydata import make_shapes_corpus
from latentforge.unet import UNetConfig, build_unet

TINY_MODEL = {
    "base_channels": 8,
    "level_multipliers": [1, 2],
    "blocks_per_level": 1,
    "attention_levels": [1],
    "context_dim": 32,
    "heads": 2,
    "time_embed_dim": 16,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    corpus = ws / "corpus"
    make_shapes_corpus(corpus, n=16, size=16, seed=0)

    cfg_file = ws / "config.yaml"
    cfg_file.write_text(yaml.safe_dump({
        "model": TINY_MODEL,
        "schedule": {"T": 6, "kind": "linear", "beta_min": 0.02, "beta_max": 0.4},
        "encoder": {"kind": "hash-embedding", "context_dim": 32},
        "out_root": str(ws / "runs"),
    }))

    model = build_unet(UNetConfig(
        base_channels=8, level_multipliers=(1, 2), blocks_per_level=1,
        attention_levels=(1,), context_dim=32, heads=2, time_embed_dim=16), seed=0)
    ckpt = ws / "base_ckpt"
    save_unet(model, ckpt, step=0, seed=0)

    nine = expand_input_conv(model)
    ckpt9 = ws / "inpaint_ckpt"
    save_unet(nine, ckpt9, step=0, seed=0)

    img = ws / "input.png"
    rng = np.random.default_rng(0)
    Image.fromarray((rng.random((16, 16, 3)) * 255).astype(np.uint8)).save(img)
    mask = generate_masks((16, 16), count=1, seed=1).masks[0]
    mask_path = ws / "mask.png"
    save_mask_png(mask, mask_path)
    return ws


def _cfg(workspace) -> GlobalConfig:
    return GlobalConfig.load(workspace / "config.yaml")


class TestRunDispatch:
    def test_command_coverage(self):
        required = {"train", "sample", "inpaint", "outpaint", "distill", "refine",
                    "variations", "fuse", "fuse-text", "control", "animate",
                    "datafilter", "dedup", "beautify", "curriculum"}
        assert required <= set(COMMANDS)

    def test_unknown_command_is_usage_error(self, workspace):
        with pytest.raises(UsageError):
            run("does-not-exist", _cfg(workspace), seed=0)

    def test_sample_deterministic_bytes(self, workspace):
        cfg = _cfg(workspace)
        opts = {"checkpoint": str(workspace / "base_ckpt"), "prompt": "red circle",
                "width": 16, "height": 16, "guidance": 2.0}
        m1 = run("sample", cfg, seed=11, options=opts)
        m2 = run("sample", cfg, seed=11, options=opts)
        b1 = Path(m1.artifacts["image"]).read_bytes()
        b2 = Path(m2.artifacts["image"]).read_bytes()
        assert b1 == b2
        assert m1.metrics["nfe"] == 12  # 6 steps x 2 guided branches

    def test_resolution_cap_rejected(self, workspace):
        cfg = _cfg(workspace)
        opts = {"checkpoint": str(workspace / "base_ckpt"), "prompt": "p",
                "width": 2048, "height": 2048}
        with pytest.raises(ConfigError, match="1024"):
            run("sample", cfg, seed=0, options=opts)

    def test_manifest_chain_links_checkpoint_run(self, workspace):
        cfg = _cfg(workspace)
        train_manifest = run("train", cfg, seed=3, options={
            "manifest": str(workspace / "corpus" / "manifest.jsonl"),
            "steps": 3, "batch_size": 4,
        })
        ckpt = train_manifest.artifacts["checkpoint"]
        sample_manifest = run("sample", cfg, seed=4, options={
            "checkpoint": ckpt, "prompt": "red circle", "width": 16, "height": 16})
        assert sample_manifest.inputs["checkpoint_run"] == train_manifest.id
        run_dir = Path(sample_manifest.artifacts["image"]).parent
        stored = json.loads((run_dir / "run.json").read_text())
        assert stored["id"] == sample_manifest.id
        assert stored["seed"] == 4
        assert stored["config_hash"] == cfg.hash()

    def test_inpaint_command(self, workspace):
        cfg = _cfg(workspace)
        m = run("inpaint", cfg, seed=5, options={
            "checkpoint": str(workspace / "inpaint_ckpt"),
            "image": str(workspace / "input.png"),
            "mask": str(workspace / "mask.png"),
            "prompt": "blue square",
        })
        assert Path(m.artifacts["image"]).exists()

    def test_outpaint_command(self, workspace):
        cfg = _cfg(workspace)
        m = run("outpaint", cfg, seed=6, options={
            "checkpoint": str(workspace / "inpaint_ckpt"),
            "image": str(workspace / "input.png"),
            "direction": "right", "pixels": 8,
        })
        out = np.asarray(Image.open(m.artifacts["image"]))
        assert out.shape[1] == 24

    def test_variations_and_fusion_commands(self, workspace):
        cfg = _cfg(workspace)
        base = {"checkpoint": str(workspace / "base_ckpt"), "width": 16, "height": 16}
        m = run("variations", cfg, seed=7,
                options={**base, "image": str(workspace / "input.png")})
        assert m.metrics["regime"] == "variations"
        m = run("fuse", cfg, seed=8, options={
            **base, "images": [str(workspace / "input.png"), str(workspace / "input.png")],
            "weights": [0.5, 0.5]})
        assert m.metrics["regime"] == "image_fusion"
        m = run("fuse-text", cfg, seed=9, options={
            **base, "images": [str(workspace / "input.png")], "prompt": "red circle"})
        assert m.metrics["regime"] == "image_text_fusion"

    def test_control_command(self, workspace):
        cfg = _cfg(workspace)
        m = run("control", cfg, seed=10, options={
            "checkpoint": str(workspace / "base_ckpt"),
            "image": str(workspace / "input.png"), "prompt": "red circle"})
        assert Path(m.artifacts["edges"]).exists()
        assert Path(m.artifacts["image"]).exists()

    def test_animate_command(self, workspace):
        cfg = _cfg(workspace)
        m = run("animate", cfg, seed=11, options={
            "image": str(workspace / "input.png"), "dx": 0.1, "frames": 3,
            "depth": "constant"})
        manifest = json.loads(Path(m.artifacts["animation_manifest"]).read_text())
        assert manifest["frame_count"] == 3

    def test_datafilter_and_dedup_commands(self, workspace):
        cfg = _cfg(workspace)
        m = run("datafilter", cfg, options={
            "manifest": str(workspace / "corpus" / "manifest.jsonl")})
        assert m.metrics["kept"] == 16
        filtered = m.artifacts["manifest"]
        m2 = run("dedup", cfg, options={"manifest": filtered, "threshold": 0})
        assert m2.metrics["kept"] >= 1

    def test_beautify_command_without_endpoint(self, workspace):
        cfg = _cfg(workspace)
        m = run("beautify", cfg, options={"prompt": "a cat"})
        assert Path(m.artifacts["prompt"]).read_text() == "a cat"

    def test_curriculum_command(self, workspace):
        cfg = _cfg(workspace)
        m = run("curriculum", cfg, options={"scale": 0.125})
        table = json.loads(Path(m.artifacts["stages"]).read_text())
        assert [s["resolution"] for s in table] == [32, 48, 64, 96, 96]


class TestCliEntry:
    def test_unknown_command_exit_code(self, capsys):
        assert main(["definitely-not-a-command"]) == 2

    def test_config_error_exit_code(self, workspace, capsys):
        code = main([
            "sample", "--config", str(workspace / "config.yaml"),
            "--seed", "1", "--checkpoint", str(workspace / "base_ckpt"),
            "--prompt", "p", "--width", "4096", "--height", "4096",
        ])
        assert code == 2

    def test_dependency_error_exit_code(self, workspace, capsys):
        code = main([
            "refine", "--config", str(workspace / "config.yaml"), "--seed", "1",
            "--student", str(workspace / "missing_ckpt"),
            "--image", str(workspace / "input.png"),
        ])
        assert code == 3

    def test_seed_required_for_stochastic_commands(self, workspace, capsys):
        code = main([
            "sample", "--config", str(workspace / "config.yaml"),
            "--checkpoint", str(workspace / "base_ckpt"), "--prompt", "p",
        ])
        assert code == 2

    def test_sample_via_cli_writes_manifest(self, workspace, capsys):
        code = main([
            "sample", "--config", str(workspace / "config.yaml"), "--seed", "2",
            "--checkpoint", str(workspace / "base_ckpt"), "--prompt", "red circle",
            "--width", "16", "--height", "16",
        ])
        assert code == 0
        manifest = json.loads(capsys.readouterr().out)
        assert manifest["command"] == "sample"
        assert Path(manifest["artifacts"]["image"]).exists()

    def test_aspect_ratio_validation(self, workspace, capsys):
        code = main([
            "sample", "--config", str(workspace / "config.yaml"), "--seed", "2",
            "--checkpoint", str(workspace / "base_ckpt"), "--prompt", "p",
            "--aspect", "7:5",
        ])
        assert code == 2

    def test_curriculum_via_cli(self, workspace, capsys):
        code = main(["curriculum", "--config", str(workspace / "config.yaml"),
                     "--scale", "1.0"])
        assert code == 0


class TestGlobalConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"modell": {}}))
        with pytest.raises(ConfigError):
            GlobalConfig.load(p)

    def test_aspect_resolution(self):
        cfg = GlobalConfig()
        assert cfg.resolve_size("1:1", 512) == (512, 512)
        assert cfg.resolve_size("3:2", 512) == (768, 512)
        assert cfg.resolve_size("9:16", 576) == (576, 1024)
        with pytest.raises(ConfigError):
            cfg.resolve_size("4:3", 512)
        with pytest.raises(ConfigError):
            cfg.resolve_size("3:2", 1024)  # 1536x1024 over the cap

    def test_flag_overrides(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"out_root": "a"}))
        cfg = GlobalConfig.load(p, overrides={"out_root": "b"})
        assert cfg.out_root == "b"
