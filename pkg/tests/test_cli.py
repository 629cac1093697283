import argparse
import dataclasses
import json

import numpy as np
import pytest

from crafting import identity_frbs_
from usdenoise.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from usdenoise.cli import build_parser, main, mosaic
from usdenoise.imagio import load_image
from usdenoise.metrics import psnr
from usdenoise.network import MICRO_CONFIG

SUBCOMMANDS = ["synth", "noise", "train", "denoise", "eval", "bench", "dump-features"]


def run(*argv):
    return main([str(a) for a in argv])


def write_config(path, data_dir, out_dir, **model_kw):
    doc = {
        "model": dataclasses.replace(MICRO_CONFIG, **model_kw).to_dict(),
        "train": {"epochs": 1, "batch_size": 2, "seed": 0, "val_fraction": 0.25},
        "noise": {"sigma": 0.25, "seed": 1},
        "data": {"dir": str(data_dir)},
        "out": str(out_dir),
    }
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--out", data, "--count", 10, "--size", 16, "--seed", 3) == 0
    assert run("noise", "--data", data, "--sigma", 0.25) == 0
    cfg = write_config(root / "micro.json", data, root / "run")
    assert run("train", "--config", cfg) == 0
    return root


class TestHelp:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_lists_flags_with_defaults(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        subparsers = next(a for a in build_parser()._actions if isinstance(a, argparse._SubParsersAction))
        for action in subparsers.choices[cmd]._actions:
            if action.dest == "help":
                continue
            assert all(opt in text for opt in action.option_strings)
            if action.default not in (None, False):
                assert f"(default: {action.default}" in text


class TestSynthNoise:
    def test_split_and_files(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d", "--count", 10, "--size", 64) == 0
        manifest = json.loads((tmp_path / "d/manifest.json").read_text())
        assert len(manifest["train"]) == 7 and len(manifest["test"]) == 3
        assert len(list((tmp_path / "d/clean").glob("*.png"))) == 10

    def test_same_seed_same_bytes(self, tmp_path):
        for d in ("a", "b"):
            run("synth", "--out", tmp_path / d, "--count", 3, "--size", 16, "--seed", 9)
            run("noise", "--data", tmp_path / d, "--sigma", 0.25)
        for sub in ("clean", "noisy_s0.25"):
            for f in sorted((tmp_path / "a" / sub).iterdir()):
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_bad_size_exit_2(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d", "--count", 2, "--size", 63) == 2

    def test_non_empty_dir_exit_3(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d/x.txt").write_text("x")
        assert run("synth", "--out", tmp_path / "d", "--count", 2, "--size", 16) == 3
        assert run("synth", "--out", tmp_path / "d", "--count", 2, "--size", 16, "--force") == 0

    def test_noise_levels_and_bounds(self, tmp_path):
        d = tmp_path / "d"
        run("synth", "--out", d, "--count", 10, "--size", 64)
        assert run("noise", "--data", d, "--sigma", 0.25, 0.35, 0.45) == 0
        assert sorted(p.name for p in d.glob("noisy_s*")) == ["noisy_s0.25", "noisy_s0.35", "noisy_s0.45"]
        vals = [psnr(load_image(d / "noisy_s0.25" / f.name), load_image(f)) for f in sorted((d / "clean").iterdir())]
        assert np.isfinite(np.mean(vals)) and np.mean(vals) < 30
        assert json.loads((d / "noisy_s0.25" / "noise.json").read_text())["sigma"] == 0.25

    def test_zero_sigma_copies(self, tmp_path):
        d = tmp_path / "d"
        run("synth", "--out", d, "--count", 3, "--size", 16)
        run("noise", "--data", d, "--sigma", 0)
        for f in (d / "clean").iterdir():
            assert np.array_equal(load_image(d / "noisy_s0" / f.name).data, load_image(f).data)

    def test_missing_clean_exit_3(self, tmp_path):
        assert run("noise", "--data", tmp_path, "--sigma", 0.25) == 3


class TestTrain:
    def test_smoke_outputs(self, workspace):
        hist = (workspace / "run/history.csv").read_text().splitlines()
        assert len(hist) == 2
        assert (workspace / "run/checkpoint.usdn").is_file()

    def test_invalid_config_exit_2(self, workspace, tmp_path, capsys):
        cfg = json.loads((workspace / "micro.json").read_text())
        cfg["model"]["stripe_widths"] = [3, 2, 2, 2]
        (tmp_path / "bad.json").write_text(json.dumps(cfg))
        assert run("train", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
        assert "stripe_widths" in capsys.readouterr().err

    def test_missing_data_exit_3(self, workspace, tmp_path):
        assert run("train", "--config", workspace / "micro.json", "--data", tmp_path / "nope",
                   "--out", tmp_path / "o") == 3

    def test_resume_continues(self, workspace, tmp_path, capsys):
        out = tmp_path / "resumed"
        assert run("train", "--config", workspace / "micro.json", "--out", out, "--epochs", 2,
                   "--resume", workspace / "run/checkpoint.usdn") == 0
        assert "resuming from epoch 1" in capsys.readouterr().out
        rows = (out / "history.csv").read_text().splitlines()
        assert len(rows) == 3 and rows[1] == (workspace / "run/history.csv").read_text().splitlines()[1]

    def test_nan_exit_4(self, workspace, tmp_path):
        assert run("train", "--config", workspace / "micro.json", "--out", tmp_path / "o", "--lr", "1e30") == 4
        assert run("train", "--config", workspace / "micro.json", "--out", tmp_path / "o", "--lr", "1e300") == 2

    @pytest.mark.parametrize("flags,frb,attn", [([], True, True), (["--no-frb"], False, True),
                                                (["--cnn-encoder"], True, False),
                                                (["--no-frb", "--cnn-encoder"], False, False)])
    def test_ablation_flags(self, workspace, tmp_path, flags, frb, attn):
        out = tmp_path / "abl"
        assert run("train", "--config", workspace / "micro.json", "--out", out, "--epochs", 0, *flags) == 0
        names = load_checkpoint(out / "checkpoint.usdn").params
        assert any(n.startswith("frb_chains") for n in names) == frb
        assert any(".qkv." in n for n in names) == attn


class TestDenoiseEvalBench:
    def test_denoise_count_and_determinism(self, workspace, tmp_path):
        src = workspace / "data/noisy_s0.25"
        for d in ("a", "b"):
            assert run("denoise", "--ckpt", workspace / "run/checkpoint.usdn", "--input", src,
                       "--output", tmp_path / d) == 0
        outs = sorted((tmp_path / "a").iterdir())
        assert len(outs) == 10
        assert all(f.read_bytes() == (tmp_path / "b" / f.name).read_bytes() for f in outs)

    def test_size_policy(self, workspace, tmp_path):
        run("synth", "--out", tmp_path / "big", "--count", 2, "--size", 24)
        ck = workspace / "run/checkpoint.usdn"
        assert run("denoise", "--ckpt", ck, "--input", tmp_path / "big/clean", "--output", tmp_path / "o") == 3
        assert run("denoise", "--ckpt", ck, "--input", tmp_path / "big/clean", "--output", tmp_path / "o",
                   "--resize") == 0
        assert load_image(tmp_path / "o/00000.png").shape[-1] == 16

    def test_eval_report(self, workspace, tmp_path):
        data = workspace / "data"
        for name in ("a.csv", "b.csv"):
            assert run("eval", "--pred", data / "noisy_s0.25", "--clean", data / "clean", "--out", tmp_path / name,
                       "--sigma", 0.25) == 0
        text = (tmp_path / "a.csv").read_text()
        assert text == (tmp_path / "b.csv").read_text()
        lines = text.splitlines()
        assert len(lines) == 12 and lines[-1].startswith("MEAN,")
        assert all(len(v.split(".")[1]) == 4 for v in lines[-1].split(",")[1:])

    def test_eval_no_pairs_exit_3(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        assert run("eval", "--pred", tmp_path / "a", "--clean", tmp_path / "b", "--out", tmp_path / "r.csv") == 3

    def test_bench_order_and_identity(self, workspace, tmp_path, capsys):
        data = workspace / "data"
        assert run("bench", "--data", data, "--sigma", 0.25, "--ckpt", workspace / "run/checkpoint.usdn",
                   "--out", tmp_path / "b.csv") == 0
        rows = [line.split(",") for line in (tmp_path / "b.csv").read_text().splitlines()]
        assert [r[0] for r in rows] == ["method", "identity", "median3", "lee7", "model"]
        test_names = [p.split("/")[-1] for p in json.loads((data / "manifest.json").read_text())["test"]]
        noisy = np.mean([psnr(load_image(data / "noisy_s0.25" / n), load_image(data / "clean" / n))
                         for n in test_names])
        assert float(rows[1][1]) == pytest.approx(noisy, abs=5e-5)

    def test_bench_missing_ckpt_warns(self, workspace, tmp_path, capsys):
        assert run("bench", "--data", workspace / "data", "--ckpt", tmp_path / "none.usdn") == 0
        cap = capsys.readouterr()
        assert "warning" in cap.err and "model" not in cap.out


class TestDumpFeatures:
    def test_identity_frb_mosaics_identical(self, workspace, tmp_path):
        ckpt = load_checkpoint(workspace / "run/checkpoint.usdn")
        model = identity_frbs_(ckpt.build_model())
        save_checkpoint(Checkpoint.capture(model, ckpt.train_config), tmp_path / "id.usdn")
        img = workspace / "data/noisy_s0.25/00000.png"
        for stage in (1, 3):
            assert run("dump-features", "--ckpt", tmp_path / "id.usdn", "--input", img, "--stage", stage,
                       "--out", tmp_path / "f") == 0
            pre = (tmp_path / f"f/stage{stage}_pre.png").read_bytes()
            assert pre == (tmp_path / f"f/stage{stage}_post.png").read_bytes()

    def test_stage1_mosaic_tiles(self, workspace, tmp_path):
        run("dump-features", "--ckpt", workspace / "run/checkpoint.usdn",
            "--input", workspace / "data/clean/00000.png", "--out", tmp_path)
        # 4 channels of 16x16 on a 2x2 grid
        assert load_image(tmp_path / "stage1_pre.png").shape[-2:] == (32, 32)

    def test_invalid_stage_exit_2(self, workspace, tmp_path):
        assert run("dump-features", "--ckpt", workspace / "run/checkpoint.usdn",
                   "--input", workspace / "data/clean/00000.png", "--stage", 5, "--out", tmp_path) == 2

    def test_mosaic_layout(self):
        maps = [np.full((2, 3), v) for v in (0.1, 0.2, 0.3)]
        m = mosaic(maps).plane()
        assert m.shape == (4, 6)
        assert m[0, 0] == 0.1 and m[0, 3] == 0.2 and m[2, 0] == 0.3 and m[2, 3] == 0.0


def test_module_entrypoint():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "usdenoise", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
