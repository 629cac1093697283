"""Command-line entry point: ``usdenoise <command> [options]``.

Exit codes: 0 success, 2 config/usage error, 3 data/path error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .errors import ConfigError, ContractError, DatasetError, FormatError, NumericError
from .imagio import (DatasetManifest, ImageTensor, PhantomSpec, fit_to_size, list_images, load_image,
                     make_splits, quantize, save_image, synth_phantom)
from .metrics import MetricReport, evaluate_pairs, score
from .network import ModelConfig, build_model, denoise, dump_stage_features
from .optim import TrainConfig
from .speckle import NoiseSpec, add_speckle, lee_filter, median_filter
from .training import PairSet, train

log = logging.getLogger("usdenoise")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BENCH_METHODS = ("identity", "median3", "lee7", "model")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def noisy_dirname(sigma: float) -> str:
    return f"noisy_s{sigma:g}"


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.25, 1))
    data_dir: Path | None = None
    out_dir: Path = Path("runs/default")
    fit: str = "warp"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"model", "train", "noise", "data", "out"}
        if unknown:
            raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
        data = doc.get("data", {})
        noise = doc.get("noise", {})
        try:
            spec = NoiseSpec(**{"sigma": 0.25, "seed": 1, **noise})
        except TypeError as exc:
            raise ConfigError(f"noise: {exc}") from exc
        except ContractError as exc:
            raise ConfigError(f"noise: {exc}") from exc
        fit = data.get("fit", "warp")
        if fit not in ("warp", "crop"):
            raise ConfigError(f"data.fit: must be 'warp' or 'crop', got {fit!r}")
        return cls(
            model=ModelConfig.from_dict(doc.get("model", {})),
            train=TrainConfig.from_dict(doc.get("train", {})),
            noise=spec,
            data_dir=Path(data["dir"]) if data.get("dir") else None,
            out_dir=Path(doc.get("out", "runs/default")),
            fit=fit,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise CliError(f"config file {path} not found", EXIT_DATA) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def _override(cfg: RunConfig, args) -> RunConfig:
    model_kw, train_kw, noise_kw = {}, {}, {}
    if args.no_frb:
        model_kw["use_frb"] = False
    if args.cnn_encoder:
        model_kw["encoder"] = "cnn"
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr0"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            train_kw[key] = getattr(args, flag)
    if args.sigma is not None:
        noise_kw["sigma"] = args.sigma
    try:
        cfg = replace(
            cfg,
            model=replace(cfg.model, **model_kw),
            train=replace(cfg.train, **train_kw),
            noise=replace(cfg.noise, **noise_kw),
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    if args.data is not None:
        cfg.data_dir = Path(args.data)
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    return cfg


# -- data helpers ------------------------------------------------------------

def _load_manifest(data_dir: Path) -> DatasetManifest:
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"{path} not found (run `usdenoise synth` first)")
    return DatasetManifest.load(path)


def _load_stack(paths: list[Path], size: int, fit: str) -> np.ndarray:
    imgs = []
    for p in paths:
        img = load_image(p)
        if img.shape[-2:] != (size, size):
            img = fit_to_size(img, size, fit)
        imgs.append(img.data[0])
    return np.stack(imgs)


def _pairs(data_dir: Path, names: list[str], sigma: float, size: int, fit: str) -> PairSet:
    noisy_dir = data_dir / noisy_dirname(sigma)
    if not noisy_dir.is_dir():
        raise DatasetError(f"{noisy_dir} not found (run `usdenoise noise --sigma {sigma:g}` first)")
    clean = _load_stack([data_dir / "clean" / n for n in names], size, fit)
    noisy = _load_stack([noisy_dir / n for n in names], size, fit)
    return PairSet(noisy, clean)


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.size < 8 or args.size % 8:
        raise ConfigError(f"--size: must be >= 8 and divisible by 8, got {args.size}")
    if args.count < 2:
        raise ConfigError(f"--count: need at least 2 images, got {args.count}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force)", EXIT_DATA)
    spec = PhantomSpec(size=args.size, n_blobs=args.blobs, blur_sigma=args.blur)
    clean = out / "clean"
    clean.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        save_image(synth_phantom(spec, [args.seed, i]), clean / f"{i:05d}.png")
    manifest = make_splits(clean, args.ratio, args.seed)
    manifest.save(out / "manifest.json")
    print(f"wrote {args.count} phantoms to {clean} ({len(manifest.train)} train / {len(manifest.test)} test)")
    return EXIT_OK


def cmd_noise(args) -> int:
    data = Path(args.data)
    clean = data / "clean"
    if not clean.is_dir():
        raise DatasetError(f"{clean} not found")
    names = list_images(clean)
    for sigma in args.sigma:
        spec = NoiseSpec(sigma=sigma, seed=args.seed, model=args.noise_model)
        target = data / noisy_dirname(sigma)
        target.mkdir(parents=True, exist_ok=True)
        for i, name in enumerate(names):
            img = load_image(clean / name)
            noisy = add_speckle(img, _seeded(spec, i))
            save_image(noisy, target / Path(name).with_suffix(".png").name)
        sidecar = {"model": spec.model, "sigma": spec.sigma, "seed": spec.seed, "count": len(names)}
        (target / "noise.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        print(f"wrote {len(names)} noisy images to {target}")
    return EXIT_OK


def _seeded(spec: NoiseSpec, index: int) -> NoiseSpec:
    # one independent stream per image, reproducible from (seed, index)
    child = np.random.SeedSequence([spec.seed, index]).generate_state(1)[0]
    return replace(spec, seed=int(child))


def cmd_train(args) -> int:
    cfg = _override(RunConfig.load(args.config) if args.config else RunConfig(), args)
    if cfg.data_dir is None:
        raise ConfigError("data.dir: no dataset directory given (config or --data)")
    if not cfg.data_dir.is_dir():
        raise DatasetError(f"{cfg.data_dir} not found")
    manifest = _load_manifest(cfg.data_dir)
    names = [Path(p).name for p in manifest.train]
    pairs = _pairs(cfg.data_dir, names, cfg.noise.sigma, cfg.model.input_size, cfg.fit)
    train_set, val_set = pairs.split(cfg.train.val_fraction)

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expected_model=cfg.model)
        print(f"resuming from epoch {resume.epoch}")
    model = build_model(cfg.model, seed=cfg.train.seed)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "run_config.json").write_text(json.dumps({
        "model": cfg.model.to_dict(), "train": cfg.train.to_dict(),
        "noise": {"sigma": cfg.noise.sigma, "seed": cfg.noise.seed, "model": cfg.noise.model},
        "data": {"dir": str(cfg.data_dir), "fit": cfg.fit}, "out": str(cfg.out_dir),
    }, indent=2) + "\n")
    print(f"training {model.parameter_count()} parameters on {len(train_set)} pairs "
          f"({len(val_set)} validation), {cfg.train.epochs} epochs")
    t0 = time.perf_counter()

    def report(row):
        print(f"epoch {row['epoch']:3d}  train_l1 {row['train_l1']:.6f}  val_l1 {row['val_l1']:.6f}  "
              f"val_psnr {row['val_psnr']:.4f}  lr {row['lr']:.2e}  [{time.perf_counter() - t0:.0f}s]",
              flush=True)

    train(model, train_set, val_set, cfg.train, out_dir=cfg.out_dir, resume=resume, on_epoch=report)
    print(f"checkpoint: {cfg.out_dir / 'checkpoint.usdn'}")
    return EXIT_OK


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        return [path / n for n in list_images(path)]
    if path.is_file():
        return [path]
    raise DatasetError(f"{path} not found")


def cmd_denoise(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model().eval()
    size = ckpt.model_config.input_size
    files = _input_files(Path(args.input))
    if not files:
        raise DatasetError(f"no images under {args.input}")
    imgs = [load_image(f) for f in files]
    wrong = [f.name for f, im in zip(files, imgs) if im.shape[-2:] != (size, size)]
    if wrong and args.policy == "reject":
        raise CliError(f"{len(wrong)} inputs are not {size}x{size}: {', '.join(wrong[:10])}", EXIT_DATA)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for f, im in zip(files, imgs):
        if im.shape[-2:] != (size, size):
            im = fit_to_size(im, size)
        save_image(denoise(model, im), out / f.with_suffix(".png").name)
    print(f"denoised {len(files)} images into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_pairs(args.pred, args.clean, args.sigma)
    report.write_csv(args.out)
    for e in report.errors:
        print(f"warning: {e}", file=sys.stderr)
    m = report.mean()
    print(f"{len(report.rows)} pairs: PSNR {m.psnr:.4f}  SSIM {m.ssim:.4f}  RMSE {m.rmse:.4f}")
    return EXIT_OK


def bench_rows(data_dir: Path, sigma: float, ckpt_path=None, split: str = "test") -> list[tuple[str, MetricReport]]:
    """Score each baseline (and the model, if a checkpoint is given) on one noisy set.

    All outputs are quantized to 8 bits first, as if written to disk.
    """
    noisy_dir = data_dir / noisy_dirname(sigma)
    if not noisy_dir.is_dir():
        raise DatasetError(f"{noisy_dir} not found")
    if split == "test" and (data_dir / "manifest.json").is_file():
        names = [Path(p).name for p in _load_manifest(data_dir).test]
    else:
        names = list_images(noisy_dir)
    if not names:
        raise DatasetError(f"no images to benchmark under {noisy_dir}")
    noisy = [load_image(noisy_dir / n) for n in names]
    clean = [load_image(data_dir / "clean" / n) for n in names]

    methods = {
        "identity": lambda im: im,
        "median3": lambda im: median_filter(im, 3),
        "lee7": lambda im: lee_filter(im, 7),
    }
    if ckpt_path is not None:
        ckpt = load_checkpoint(ckpt_path)
        model = ckpt.build_model().eval()
        size = ckpt.model_config.input_size

        def run_model(im):
            return denoise(model, im if im.shape[-2:] == (size, size) else fit_to_size(im, size))

        methods["model"] = run_model
    rows = []
    for method in BENCH_METHODS:
        if method not in methods:
            continue
        report = MetricReport(sigma=sigma)
        for name, n_img, c_img in zip(names, noisy, clean):
            out = quantize(methods[method](n_img))
            if out.shape != c_img.shape:
                c_img = fit_to_size(c_img, out.shape[-1])
            report.rows.append(score(out, c_img, Path(name).stem))
        rows.append((method, report))
    return rows


def cmd_bench(args) -> int:
    ckpt = args.ckpt
    if ckpt is not None and not Path(ckpt).is_file():
        print(f"warning: checkpoint {ckpt} not found; skipping the model row", file=sys.stderr)
        ckpt = None
    elif ckpt is None:
        print("warning: no --ckpt given; skipping the model row", file=sys.stderr)
    rows = bench_rows(Path(args.data), args.sigma, ckpt, args.split)
    lines = ["method,psnr,ssim,rmse"]
    for method, report in rows:
        m = report.mean()
        lines.append(f"{method},{m.psnr:.4f},{m.ssim:.4f},{m.rmse:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def mosaic(maps: list[np.ndarray]) -> ImageTensor:
    """Tile equally sized maps row-major on a near-square grid without gaps."""
    n = len(maps)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    h, w = maps[0].shape
    canvas = np.zeros((rows * h, cols * w))
    for i, m in enumerate(maps):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = m
    return ImageTensor(np.clip(canvas, 0.0, 1.0), "unit")


def cmd_dump_features(args) -> int:
    if not 1 <= args.stage <= 4:
        raise ConfigError(f"--stage: must be in 1..4, got {args.stage}")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model().eval()
    img = load_image(args.input)
    size = ckpt.model_config.input_size
    if img.shape[-2:] != (size, size):
        img = fit_to_size(img, size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, with_frb in (("pre", False), ("post", True)):
        maps = dump_stage_features(model, img, args.stage, with_frb)
        save_image(mosaic(maps), out / f"stage{args.stage}_{tag}.png")
    print(f"wrote {out / f'stage{args.stage}_pre.png'} and {out / f'stage{args.stage}_post.png'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="usdenoise", description="Ultrasound speckle denoising toolkit.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="target dataset directory")
    p.add_argument("--count", type=int, default=100, help="number of phantoms")
    p.add_argument("--size", type=int, default=64, help="phantom side length (divisible by 8)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed for phantoms and split")
    p.add_argument("--ratio", type=float, default=0.7, help="train fraction of the split")
    p.add_argument("--blobs", type=int, default=5, help="ellipses per phantom")
    p.add_argument("--blur", type=float, default=1.0, help="Gaussian blur sigma in pixels")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("noise", help="add speckle noise to a dataset's clean images", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory holding clean/")
    p.add_argument("--sigma", type=float, nargs="+", default=[0.25], help="noise level(s)")
    p.add_argument("--seed", type=int, default=1, help="noise RNG seed")
    p.add_argument("--noise-model", default="multiplicative_gaussian", choices=["multiplicative_gaussian"],
                   help="speckle model")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("train", help="train the denoiser", formatter_class=fmt)
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory for checkpoint and history")
    p.add_argument("--sigma", type=float, help="noise level of the training pairs")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--batch-size", type=int, help="minibatch size")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int, help="training seed (init and shuffling)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-frb", action="store_true", help="ablation: drop the FRB skip refinement")
    p.add_argument("--cnn-encoder", action="store_true", help="ablation: convolutional encoder blocks")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise images with a checkpoint", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--resize", dest="policy", action="store_const", const="resize",
                   help="resize inputs whose size differs from the model's")
    g.add_argument("--reject", dest="policy", action="store_const", const="reject",
                   help="fail on inputs whose size differs from the model's")
    p.set_defaults(func=cmd_denoise, policy="reject")

    p = sub.add_parser("eval", help="score predictions against clean images", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="directory of denoised images")
    p.add_argument("--clean", required=True, help="directory of reference images")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--sigma", type=float, default=None, help="noise level, recorded in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="compare classical baselines and the model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--sigma", type=float, default=0.25, help="noise level to benchmark")
    p.add_argument("--ckpt", default=None, help="model checkpoint (model row skipped if absent)")
    p.add_argument("--split", choices=["test", "all"], default="test", help="which images to score")
    p.add_argument("--out", default=None, help="comparison CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-features", help="export skip features before/after FRB", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="input image")
    p.add_argument("--stage", type=int, default=1, help="encoder stage 1..4")
    p.add_argument("--out", default=".", help="output directory for the mosaics")
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
