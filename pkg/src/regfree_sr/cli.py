"""Command-line entry point.

    regfree-sr [--config run.json] [--threads T] <command> [flags]

Commands: calibrate, degrade, build-dataset, train, infer, evaluate,
make-fixtures. Each command writes into its output directory a
``config.json`` holding the effective :class:`RunConfig` (config file merged
with flag overrides). Feeding that file back with ``--config`` replays the
run.

Config file grammar: one JSON object whose optional keys are the section
names below; every section is an object whose keys are the fields of the
matching dataclass. Unknown sections or fields are an error.

    {"seed": 0,
     "generator": {...GeneratorConfig}, "discriminator": {...DiscriminatorConfig},
     "features": {...FeatureConfig}, "losses": {...LossWeights},
     "train": {...TrainConfig minus weights}, "degradation": {...DegradationParams},
     "calibration": {...}, "dataset": {...}, "inference": {...}, "metrics": {...SsimConfig}}

Run directory layout:
    calibrate      calibration.json, residual.png, config.json
    degrade        <out image> (+ config.json next to it)
    build-dataset  manifest.json, <source>/<row>_<col>_{lr,hr}.png, config.json
    train          checkpoints/epoch_NNNN.ckpt, final.ckpt, train_log.csv,
                   val_log.csv, summary.json, config.json
    infer          <out image> (+ optional --report timing JSON, config.json next to it)
    evaluate       eval.csv, eval_table.txt, eval.json, config.json
    make-fixtures  hr/*.png, lr_measured.png, fixtures.json, config.json
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .dataset import build_dataset, load_dataset, save_dataset
from .degradation import DegradationParams, calibrate, degrade
from .fixtures import make_fixtures
from .image import SUPPORTED_SUFFIXES, load_image, make_rng, save_image
from .inference import benchmark_inference, generator_backend, super_resolve, write_report
from .losses import LossWeights
from .metrics import SsimConfig, evaluate_pairs
from .nn import DiscriminatorConfig, FeatureConfig, GeneratorConfig, load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("regfree_sr")

COMMANDS = ("calibrate", "degrade", "build-dataset", "train", "infer", "evaluate", "make-fixtures")


@dataclass
class CalibrationConfig:
    sigma_grid: List[float] = field(default_factory=lambda: [1.0 + 0.25 * i for i in range(9)])
    var_grid: List[float] = field(default_factory=lambda: [1e-4, 2e-4, 4e-4, 8e-4])
    denoiser: str = "box"


@dataclass
class DatasetConfig:
    patch_lr: int = 96
    stride: Optional[int] = None
    augment: List[str] = field(default_factory=list)
    split_fraction: float = 0.9


@dataclass
class InferenceConfig:
    tile: int = 100
    overlap: int = 20
    threads: int = 1


@dataclass
class TrainSection:
    """TrainConfig fields except ``weights`` (which live under ``losses``) and
    ``seed`` (global)."""

    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 1
    d_steps_per_g_step: int = 1
    pretrain_epochs: int = 0
    renoise: bool = False
    dtype: str = "float32"


SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "features": FeatureConfig,
    "losses": LossWeights,
    "train": TrainSection,
    "degradation": DegradationParams,
    "calibration": CalibrationConfig,
    "dataset": DatasetConfig,
    "inference": InferenceConfig,
    "metrics": SsimConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    degradation: DegradationParams = field(default_factory=DegradationParams)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: SsimConfig = field(default_factory=SsimConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        # "command" is written by echo_config and ignored on replay
        unknown = set(d) - set(SECTIONS) - {"seed", "command"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed must be an integer")
            kw["seed"] = d["seed"]
        for name, typ in SECTIONS.items():
            if name in d:
                kw[name] = _build(typ, d[name], name)
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()}
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, weights=self.losses, **asdict(self.train))

    def update(self, section: str, **kw) -> None:
        """Flag overrides; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        if kw:
            cur = asdict(getattr(self, section))
            cur.update(kw)
            setattr(self, section, _build(SECTIONS[section], cur, section))


def _build(typ, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    try:
        return typ(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)


def echo_config(cfg: RunConfig, out_dir, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"command": command, **cfg.to_dict()}, fh, indent=2, sort_keys=True)


def parse_grid(text: str) -> List[float]:
    """``a:b:step`` (inclusive, endpoint-tolerant) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid must be a:b:step, got {text!r}")
        a, b, step = (float(p) for p in parts)
        if step <= 0 or b < a:
            raise ConfigError(f"bad grid {text!r}")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [round(a + i * step, 12) for i in range(n)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc


def _require_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _list_images(d):
    if not os.path.isdir(d):
        raise FileNotFoundError(f"HR directory not found: {d}")
    names = sorted(n for n in os.listdir(d) if n.lower().endswith(SUPPORTED_SUFFIXES))
    if not names:
        raise FileNotFoundError(f"no images in {d}")
    return names


def _load_params(arg: str) -> dict:
    """``--params`` is a JSON file path or an inline JSON object."""
    if os.path.isfile(arg):
        with open(arg) as fh:
            d = json.load(fh)
    else:
        try:
            d = json.loads(arg)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--params is neither a file nor JSON: {arg!r}") from exc
    # accept a calibration report directly
    if "best_sigma" in d:
        d = {"sigma": d["best_sigma"], "noise_variance": d["best_variance"], "factor": d["factor"]}
    return d


# --- commands -------------------------------------------------------------


def cmd_calibrate(args, cfg: RunConfig):
    _require_file(args.hr, "HR image")
    _require_file(args.lr, "LR image")
    if args.sigma_grid:
        cfg.calibration.sigma_grid = parse_grid(args.sigma_grid)
    if args.var_grid:
        cfg.calibration.var_grid = parse_grid(args.var_grid)
    cfg.update("calibration", denoiser=args.denoiser)
    c = cfg.calibration
    report = calibrate(load_image(args.hr), load_image(args.lr), c.sigma_grid, c.var_grid, denoiser=c.denoiser)
    cfg.update("degradation", sigma=report.best_sigma, noise_variance=report.best_variance, factor=report.factor)
    report.save(args.out)
    echo_config(cfg, args.out, "calibrate")
    print(f"sigma={report.best_sigma} variance={report.best_variance} (estimated {report.estimated_variance:.3e})")


def cmd_degrade(args, cfg: RunConfig):
    _require_file(args.input, "input image")
    if args.params:
        cfg.update("degradation", **_load_params(args.params))
    img = load_image(args.input)
    out = degrade(img, cfg.degradation, make_rng(cfg.seed, 4))
    save_image(out, args.out)
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)), "degrade")


def cmd_build_dataset(args, cfg: RunConfig):
    if args.params:
        cfg.update("degradation", **_load_params(args.params))
    aug = None if args.augment is None else [a for a in args.augment.split(",") if a]
    cfg.update("dataset", patch_lr=args.patch, stride=args.stride, augment=aug, split_fraction=args.split)
    names = _list_images(args.hr_dir)
    imgs = [load_image(os.path.join(args.hr_dir, n)) for n in names]
    ids = [os.path.splitext(n)[0] for n in names]
    d = cfg.dataset
    man = build_dataset(imgs, cfg.degradation, d.patch_lr, d.stride, d.augment, d.split_fraction, cfg.seed, ids)
    save_dataset(man, args.out)
    echo_config(cfg, args.out, "build-dataset")
    n_val = len(man.select("validation"))
    print(f"{len(man.records)} pairs ({len(man.records) - n_val} train, {n_val} validation)")


def cmd_train(args, cfg: RunConfig):
    man = load_dataset(args.dataset)
    cfg.update("train", epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr)
    lr0, hr0 = man.arrays(man.records[0])
    c = lr0.shape[2]
    cfg.update("generator", upscale=man.factor, channels=c)
    cfg.update("discriminator", input_size=hr0.shape[0], channels=c)
    cfg.update("features", channels=c)
    cfg.degradation = man.params
    echo_config(cfg, args.out, "train")
    final = train(cfg.train_config(), man, args.out, cfg.generator, cfg.discriminator, cfg.features, resume=args.resume)
    print(final)


def _generator_from(path):
    _require_file(path, "checkpoint")
    return load_checkpoint(path).generator


def cmd_infer(args, cfg: RunConfig):
    _require_file(args.input, "input image")
    cfg.update("inference", tile=args.tile, overlap=args.overlap, threads=args.threads)
    gen = _generator_from(args.checkpoint)
    cfg.generator = gen.config
    img = load_image(args.input)
    if img.channels != gen.config.channels:
        raise ValueError(f"image has {img.channels} channels, checkpoint expects {gen.config.channels}")
    inf = cfg.inference
    backend = generator_backend(gen)
    out = super_resolve(img, backend, gen.config.upscale, inf.tile, inf.overlap, inf.threads)
    save_image(out, args.out)
    if args.report:
        write_report(benchmark_inference(img, backend, gen.config.upscale, inf.tile, inf.overlap, inf.threads), args.report)
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)), "infer")


def cmd_evaluate(args, cfg: RunConfig):
    man = load_dataset(args.dataset)
    gen = _generator_from(args.checkpoint)
    cfg.generator = gen.config
    split = args.split
    recs = man.select(split)
    if not recs:
        raise ValueError(f"dataset has no {split!r} pairs")
    pairs = []
    for r in recs:
        lr, hr = man.arrays(r)
        pairs.append((f"{r.source_id}@{r.origin[0]},{r.origin[1]}/r{r.rot}{'f' if r.flip else ''}", lr, hr))
    report = evaluate_pairs(pairs, gen, cfg.metrics)
    report.save(args.out)
    echo_config(cfg, args.out, "evaluate")
    print(report.table(), end="")


def cmd_make_fixtures(args, cfg: RunConfig):
    make_fixtures(cfg.seed, args.out)
    echo_config(cfg, args.out, "make-fixtures")


HANDLERS = {
    "calibrate": cmd_calibrate,
    "degrade": cmd_degrade,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "make-fixtures": cmd_make_fixtures,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config (see module docs)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for tiled inference")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="regfree-sr", description=__doc__.split("\n")[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    s = sub.add_parser("calibrate", help="fit blur sigma and noise variance from an HR/LR pair")
    s.add_argument("--hr", required=True)
    s.add_argument("--lr", required=True)
    s.add_argument("--sigma-grid", help="a:b:step or comma list")
    s.add_argument("--var-grid", help="comma list or a:b:step")
    s.add_argument("--denoiser", choices=("box", "median", "none"))
    s.add_argument("--out", required=True)

    s = sub.add_parser("degrade", help="simulate a low-resolution measurement")
    s.add_argument("--input", required=True)
    s.add_argument("--params", help="JSON file/object of degradation params or calibration.json")
    s.add_argument("--out", required=True)

    s = sub.add_parser("build-dataset", help="cut aligned LR/HR training pairs")
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--params", help="JSON file/object of degradation params or calibration.json")
    s.add_argument("--patch", type=int, help="LR patch size")
    s.add_argument("--stride", type=int, help="LR stride (default: patch)")
    s.add_argument("--augment", help="comma list of rot,flip")
    s.add_argument("--split", type=float, help="train fraction by source image")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="adversarial training")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float, help="learning rate")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", help="tiled super-resolution of one image")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tile", type=int)
    s.add_argument("--overlap", type=int)
    s.add_argument("--report", help="write a timing report JSON here")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="PSNR/SSIM against the bicubic baseline")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="validation", choices=("train", "validation"))
    s.add_argument("--out", required=True)

    s = sub.add_parser("make-fixtures", help="write the synthetic fixture set")
    s.add_argument("--out", required=True)
    return p


def run(command: str, args, cfg: RunConfig) -> int:
    HANDLERS[command](args, cfg)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "threads", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return run(args.command, args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, OSError, FloatingPointError) as exc:
        print(f"regfree-sr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
