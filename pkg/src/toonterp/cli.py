"""Command-line entry points.

Every command writes ``config.txt`` (the resolved configuration) and
``run.json`` (command line, seed, sha256 of every checkpoint read or written)
into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .ablation import SUITES, run_ablation, train_decoder_suite, train_rectify_suite
from .autoencoder import Autoencoder, AutoencoderConfig, load_autoencoder, save_autoencoder
from .config import STAGES, StageConfig, coerce, dump_kv, load_kv
from .data import (ClipBank, default_scorers, encode_caption, load_dataset, make_clips, run_pipeline,
                   save_dataset)
from .denoiser import DenoiserConfig, FreezePolicy, InterpDenoiser, build_condition, load_denoiser, save_denoiser
from .diffusion import DDIMConfig, ddim_sample, make_schedule
from .errors import ConfigError, ContractError, NumericalError, ParameterError
from .metrics import evaluate_decoder
from .sketch import EMPTY, SketchEncoder, SketchSet, guided_denoise
from .trainer import StepLog, train_autoencoder, train_decoder, train_rectify, train_sketch

log = logging.getLogger("toonterp")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class GenDataConfig:
    n_clips: int = 200
    L: int = 8
    H: int = 32
    W: int = 32
    style: str = "toon"
    fps_choices: tuple = (6, 8, 12)
    flow_threshold: float = 0.0
    eval_size: int = 50


@dataclass
class SampleConfig:
    frames: int = 16
    fps: int = 8
    caption: str = ""
    steps: int = 50
    guidance: float = 1.0


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def split_overrides(values: dict) -> dict[str, dict]:
    """Route ``model.*`` / ``ae.*`` keys to the model configs; everything else stays top level."""
    out: dict[str, dict] = {"": {}, "model": {}, "ae": {}}
    for k, v in values.items():
        head, _, rest = k.partition(".")
        if rest and head in ("model", "ae"):
            out[head][rest] = v
        else:
            out[""][k] = v
    return out


def resolve(args, extra: dict | None = None) -> dict[str, dict]:
    """Merge config file, ``--set`` overrides and ``--seed`` (later wins)."""
    values = dict(extra or {})
    if args.config:
        values.update(load_kv(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return split_overrides(values)


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, args, command: str):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.record = {"command": command, "argv": sys.argv[1:], "version": __version__, "inputs": {}, "outputs": {}}

    def path(self, name: str) -> Path:
        return self.out / name

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"input not found: {path}")
        self.record["inputs"][str(path)] = sha256_file(path)
        return path

    def output(self, path: Path) -> None:
        self.record["outputs"][path.name] = sha256_file(path)

    def finish(self, config: dict, seed: int) -> None:
        self.record["seed"] = seed
        self.record["config"] = config
        self.path("config.txt").write_text(dump_kv(_flatten(config)))
        self.path("run.json").write_text(json.dumps(self.record, indent=2, default=str))


def _flatten(config: dict) -> dict:
    flat = {}
    for k, v in config.items():
        if isinstance(v, dict):
            flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            flat[k] = v
    return flat


def _seed(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def _bank(data_dir, split: str) -> ClipBank:
    d = Path(data_dir)
    if not (d / "clips").is_dir():
        raise ConfigError(f"{d} is not a dataset directory (run gen-data first)")
    clips = load_dataset(d, split)
    if not clips:
        raise ConfigError(f"no {split} clips in {d}")
    return ClipBank.from_clips(clips)


def _stage_cfg(stage: str, values: dict) -> StageConfig:
    return StageConfig.from_mapping({**values, "stage": stage})


def _denoiser_cfg(values: dict, frames: int) -> DenoiserConfig:
    return DenoiserConfig(**{"frame_count": frames, **coerce(DenoiserConfig, values)})


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    run = Run(args, "gen-data")
    values = resolve(args)
    top = dict(values[""])
    seed = int(top.pop("seed", 0))
    cfg = GenDataConfig(**coerce(GenDataConfig, top))
    clips = make_clips(cfg.n_clips, seed, cfg.L, cfg.H, cfg.W, cfg.fps_choices, style=cfg.style)
    scorers = default_scorers()
    thresholds = {name: float("-inf") for name in scorers}
    thresholds["flow"] = cfg.flow_threshold
    manifest = run_pipeline(clips, scorers, thresholds, seed=seed, eval_size=cfg.eval_size)
    save_dataset(clips, run.out, manifest)
    with open(run.path("filter_reports.jsonl"), "w") as fh:
        for r in manifest.reports:
            fh.write(json.dumps(asdict(r)) + "\n")
    run.output(run.path("manifest.jsonl"))
    run.finish({**asdict(cfg)}, seed)
    print(f"{len(manifest.ids('train'))} train / {len(manifest.ids('eval'))} eval clips "
          f"({cfg.n_clips - len(manifest.entries)} rejected) -> {run.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    stage = args.stage
    run = Run(args, f"train {stage}")
    values = resolve(args)
    cfg = _stage_cfg(stage, values[""])
    _seed(cfg.seed, cfg.deterministic)
    bank = _bank(args.data, "train")
    logger = StepLog(run.path("train_log.jsonl"))
    config = {**cfg.to_dict()}
    if stage == "autoencoder":
        ae_cfg = AutoencoderConfig(**coerce(AutoencoderConfig, values["ae"]))
        ae = Autoencoder(ae_cfg, "vanilla")
        train_autoencoder(ae, bank, cfg, logger)
        ae.decoder.variant = "full"
        out = run.path("autoencoder.pt")
        save_autoencoder(ae, out)
        config["ae"] = asdict(ae.cfg)
    else:
        if not args.autoencoder:
            raise ConfigError(f"train {stage} needs --autoencoder")
        ae = load_autoencoder(run.input(args.autoencoder))
        if stage == "decoder":
            disc_path = run.path("discriminator.pt")
            result = train_decoder(ae, bank, cfg, logger)
            out = run.path("autoencoder.pt")
            save_autoencoder(ae, out, extra={"stage": "decoder"})
            torch.save(result["disc"], disc_path)
        elif stage == "rectify":
            if args.base:
                model = load_denoiser(run.input(args.base))
            else:
                model = InterpDenoiser(_denoiser_cfg(values["model"], bank.frames.shape[1]))
            config["model"] = asdict(model.cfg)
            result = train_rectify(model, ae, bank, cfg, logger=logger)
            out = run.path("denoiser.pt")
            save_denoiser(model, out, extra={"policy": cfg.freeze_policy})
            torch.save({k: result[k] for k in ("step", "optimizer", "config")}, run.path("optimizer.pt"))
        else:  # sketch
            if not args.denoiser:
                raise ConfigError("train sketch needs --denoiser")
            model = load_denoiser(run.input(args.denoiser))
            encoder = SketchEncoder(model.cfg, ae.cfg.downsample)
            result = train_sketch(model, encoder, ae, bank, cfg, logger=logger)
            out = run.path("sketch_encoder.pt")
            torch.save({"format": "toonterp/sketch", "config": asdict(model.cfg),
                        "downsample": ae.cfg.downsample, "tensors": result["encoder"], "modes": result["modes"]}, out)
    run.output(out)
    run.finish(config, cfg.seed)
    losses = logger.losses
    print(f"train {stage}: {len(losses)} steps, final loss {losses[-1] if losses else float('nan'):.5f} -> {out}")
    return EXIT_OK


def load_sketch_encoder(path) -> SketchEncoder:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "toonterp/sketch":
        raise ConfigError(f"{path} is not a sketch-encoder checkpoint")
    enc = SketchEncoder(DenoiserConfig(**blob["config"]), blob["downsample"])
    enc.load_state_dict(blob["tensors"])
    return enc


def read_image(path, mode: str = "RGB") -> torch.Tensor:
    try:
        img = np.asarray(Image.open(path).convert(mode), dtype=np.float32)
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc
    img = img[..., None] if img.ndim == 2 else img
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)) / 127.5 - 1.0)


def write_image(frame: torch.Tensor, path) -> None:
    u8 = ((frame.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(u8).save(path)


def parse_sketch_args(items, L: int) -> dict[int, Path]:
    mapping = {}
    for item in items or []:
        idx, sep, path = item.partition("=")
        if not sep or not idx.strip().lstrip("-").isdigit():
            raise ConfigError(f"--sketch expects INDEX=PATH, got {item!r}")
        mapping[int(idx)] = Path(path)
    try:
        SketchSet.sparse(L, {k: None for k in mapping})
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    return mapping


def cmd_sample(args) -> int:
    run = Run(args, "sample")
    values = resolve(args)
    top = dict(values[""])
    seed = int(top.pop("seed", 0))
    cli = {k: v for k, v in (("frames", args.frames), ("fps", args.fps), ("caption", args.caption),
                            ("steps", args.steps), ("guidance", args.guidance)) if v is not None}
    cfg = SampleConfig(**coerce(SampleConfig, {**top, **cli}))
    L = cfg.frames
    if L < 2:
        raise ConfigError("--frames must be at least 2")
    for name in ("first", "last", "autoencoder", "denoiser"):
        if not getattr(args, name):
            raise ConfigError(f"sample needs --{name}")
    sketch_paths = parse_sketch_args(args.sketch, L)
    _seed(seed)
    x1, xL = read_image(run.input(args.first)), read_image(run.input(args.last))
    if x1.shape != xL.shape:
        raise ConfigError(f"first and last frames differ in size: {tuple(x1.shape)} vs {tuple(xL.shape)}")
    H, W = x1.shape[-2:]
    ae = load_autoencoder(run.input(args.autoencoder))
    ae.check_frames(x1)
    model = load_denoiser(run.input(args.denoiser))
    if L > model.cfg.frame_count:
        raise ConfigError(f"denoiser supports at most {model.cfg.frame_count} frames, asked for {L}")
    model.eval()
    caption = encode_caption(cfg.caption.split())
    with torch.no_grad():
        z1, pyr1 = ae.encode(x1)
        zL, pyrL = ae.encode(xL)
        cond = build_condition(x1, xL, L, ae, model.icp, caption, cfg.fps)
        c, h, w = z1.shape
        if L > 2:
            denoiser = model
            if sketch_paths:
                if not args.sketch_encoder:
                    raise ConfigError("--sketch given without --sketch-encoder")
                encoder = load_sketch_encoder(run.input(args.sketch_encoder))
                sketches = SketchSet.sparse(L, {k: read_image(run.input(p), "L") for k, p in sketch_paths.items()})
                s = sketches.to_tensor(H, W).unsqueeze(0)
                denoiser = lambda z, t, cnd: guided_denoise(z, t, cnd, s.expand(z.shape[0], *s.shape[1:]),
                                                            model, encoder)
            z = ddim_sample(denoiser, (1, L, c, h, w), cond,
                            DDIMConfig(num_steps=cfg.steps, guidance_scale=cfg.guidance, seed=seed), make_schedule())
            if not torch.isfinite(z).all():
                raise NumericalError("sampler produced non-finite latents")
        else:
            z = torch.zeros(1, L, c, h, w)
        # endpoints are the inputs' own latents, so frames 1 and L are their reconstructions
        z[:, 0], z[:, -1] = z1, zL
        lift = lambda p: type(p)({i: f.unsqueeze(0) for i, f in p.features.items()})
        frames = ae.decode(z, lift(pyr1), lift(pyrL))[0]
    for k, frame in enumerate(frames, start=1):
        path = run.path(f"frame_{k:03d}.png")
        write_image(frame, path)
        run.output(path)
    run.finish({**asdict(cfg), "sketch_frames": sorted(sketch_paths)}, seed)
    print(f"wrote {L} frames to {run.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Run(args, "eval")
    values = resolve(args)
    top = dict(values[""])
    seed = int(top.pop("seed", 0))
    if top:
        raise ConfigError(f"unknown keys for eval: {sorted(top)}")
    if not args.autoencoder:
        raise ConfigError("eval needs --autoencoder")
    _seed(seed)
    ae = load_autoencoder(run.input(args.autoencoder))
    bank = _bank(args.data, "eval")
    report = evaluate_decoder(ae, bank.frames, args.variant)
    run.path("metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    run.finish({"variant": report.variant, "clips": len(bank)}, seed)
    print(f"{report.variant}: PSNR {report.psnr:.3f} dB, SSIM {report.ssim:.4f} over {len(bank)} clips")
    print("per-frame PSNR: " + " ".join(f"{v:.2f}" for v in report.curve))
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = Run(args, "ablate")
    values = resolve(args)
    stage = "decoder" if args.suite == "decoder_variants" else "rectify"
    budget = _stage_cfg(stage, values[""])
    _seed(budget.seed, budget.deterministic)
    eval_bank = _bank(args.data, "eval")
    if not args.autoencoder:
        raise ConfigError("ablate needs --autoencoder")
    ae = load_autoencoder(run.input(args.autoencoder))
    if args.checkpoints:
        ckpt_dir = Path(args.checkpoints)
        prefix = "decoder" if stage == "decoder" else "rectify"
        checkpoints = {p.stem.split("_", 1)[1]: p for p in sorted(ckpt_dir.glob(f"{prefix}_*.pt"))}
    else:
        train_bank = _bank(args.data, "train")
        if stage == "decoder":
            checkpoints = train_decoder_suite(ae, train_bank, budget, run.path("checkpoints"))
        else:
            if not args.base:
                raise ConfigError("rectify suite needs --base (a pre-trained denoiser)")
            checkpoints = train_rectify_suite(load_denoiser(run.input(args.base)), ae, train_bank, budget,
                                              run.path("checkpoints"))
    for p in checkpoints.values():
        if Path(p).is_file():
            run.input(p)
    report = run_ablation(args.suite, checkpoints, eval_bank, autoencoder=ae, seed=budget.seed)
    report.write(run.out)
    run.finish({**budget.to_dict(), "suite": args.suite}, budget.seed)
    print(report.table(), end="")
    return EXIT_OK if report.passed else EXIT_FAIL


# ----------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toonterp", description="Cartoon frame interpolation at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic clips and run the filtering pipeline")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--autoencoder", help="autoencoder checkpoint")
    p.add_argument("--denoiser", help="denoiser checkpoint (sketch stage)")
    p.add_argument("--base", help="denoiser to start rectification from")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="interpolate between two frames")
    p.add_argument("--first", help="first frame image")
    p.add_argument("--last", help="last frame image")
    p.add_argument("--frames", type=int, help="clip length L")
    p.add_argument("--fps", type=int)
    p.add_argument("--caption")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    p.add_argument("--sketch", action="append", metavar="INDEX=PATH", help="sketch for 1-based frame INDEX")
    p.add_argument("--autoencoder")
    p.add_argument("--denoiser")
    p.add_argument("--sketch-encoder", dest="sketch_encoder")
    _common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="reconstruction metrics of a decoder on the eval split")
    p.add_argument("--data", required=True)
    p.add_argument("--autoencoder")
    p.add_argument("--variant", choices=("full", "no_p3d", "vanilla"))
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and rank variants under equal budgets")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--autoencoder")
    p.add_argument("--base", help="pre-trained denoiser (rectify suite)")
    p.add_argument("--checkpoints", help="evaluate existing checkpoints instead of training")
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError, ContractError) as exc:
        print(f"toonterp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"toonterp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
