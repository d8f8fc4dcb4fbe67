"""Training stages: autoencoder pre-training, rectification, decoder and sketch-encoder training.

Every step draws its batch, timesteps and noise from generators seeded by
``(seed, step)``, so a run resumed from a checkpoint replays exactly the same
batches as an uninterrupted one.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import Autoencoder, PatchDiscriminator, PerceptualLoss, compound_loss, hinge_d_loss
from .config import StageConfig
from .data import ClipBank
from .denoiser import (ConditionBundle, FreezePolicy, InterpDenoiser, apply_freeze_policy,
                       build_condition_from_latents, grouped_state_dict, named_parameter_groups)
from .diffusion import NoiseSchedule, diffusion_loss, make_schedule
from .errors import ConfigError, FreezeViolation, NumericalError
from .sketch import EMPTY, SketchEncoder, SketchSet, extract_sketch, guided_denoise, sample_training_sketches

log = logging.getLogger(__name__)


def tensor_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def group_hashes(model: InterpDenoiser) -> dict[str, str]:
    return {g: tensor_hash(p) for g, p in named_parameter_groups(model).items()}


def module_hash(module: nn.Module) -> str:
    return tensor_hash(dict(module.named_parameters()))


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def step_generators(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    return np.random.default_rng([seed, step]), torch.Generator().manual_seed(seed * 1_000_003 + step)


def make_optimizer(named_params: Iterable[tuple[str, nn.Parameter]], lr: float, weight_decay: float):
    """AdamW without weight decay on biases and normalisation parameters."""
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        (no_decay if p.dim() <= 1 or "norm" in name else decay).append(p)
    if not decay and not no_decay:
        raise ConfigError("no trainable parameters: the optimizer would be empty")
    groups = [g for g in ({"params": decay, "weight_decay": weight_decay},
                          {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.999))


class StepLog:
    """Collects one record per step and mirrors it to a JSON-lines file when given a path."""

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and not append:
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def _check_finite(loss: torch.Tensor, step: int, stage: str, parts: dict | None = None) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"{stage}: non-finite loss at step {step} (components: {parts or {}})")


class FreezeAuditor:
    def __init__(self, hasher: Callable[[], dict[str, str]], frozen: Iterable[str], every: int):
        self.hasher = hasher
        self.frozen = list(frozen)
        self.every = every
        self.reference = {k: v for k, v in hasher().items() if k in self.frozen}

    def __call__(self, step: int, force: bool = False) -> None:
        if not force and step % self.every:
            return
        now = self.hasher()
        drifted = [k for k in self.frozen if now[k] != self.reference[k]]
        if drifted:
            raise FreezeViolation(f"frozen parameters changed by step {step}: {drifted}")


@torch.no_grad()
def encode_bank(autoencoder: Autoencoder, bank: ClipBank, chunk: int = 16) -> torch.Tensor:
    """Latents ``(N, L, C, h, w)`` of every clip in the bank."""
    out = []
    for i in range(0, len(bank), chunk):
        z, _, _ = autoencoder.encode_clip(bank.frames[i:i + chunk])
        out.append(z)
    return torch.cat(out)


def _drop_condition(cond: ConditionBundle, p: float, gen: torch.Generator) -> ConditionBundle:
    if p <= 0:
        return cond
    keep = (torch.rand(cond.c_ctx.shape[0], generator=gen) >= p)
    return replace(cond, c_ctx=cond.c_ctx * keep[:, None, None].to(cond.c_ctx.dtype),
                   c_txt=cond.c_txt * keep[:, None].long())


def _rectify_batch(model, latents, bank, idx, cond_drop, gen):
    z0 = latents[idx]
    x = bank.frames[idx]
    L = z0.shape[1]
    cond = build_condition_from_latents(z0[:, 0], z0[:, -1], x[:, 0], x[:, -1], L, model.icp,
                                        bank.captions[idx], bank.fps[idx])
    return z0, _drop_condition(cond, cond_drop, gen)


def train_rectify(model: InterpDenoiser, autoencoder: Autoencoder, bank: ClipBank, cfg: StageConfig,
                  schedule: NoiseSchedule | None = None, logger: StepLog | None = None,
                  resume: dict | None = None, latents: torch.Tensor | None = None) -> dict:
    """Fine-tune the denoiser on clips under ``cfg.freeze_policy``; returns a checkpoint dict."""
    schedule = schedule or make_schedule()
    logger = logger or StepLog()
    policy = FreezePolicy.from_variant(cfg.freeze_policy)
    if resume is not None:
        model.load_state_dict({k.replace("/", ".", 1): v for k, v in resume["model"].items()})
    apply_freeze_policy(model, policy)
    opt = make_optimizer(model.named_parameters(), cfg.learning_rate, cfg.weight_decay)
    start = 0
    if resume is not None:
        opt.load_state_dict(resume["optimizer"])
        start = resume["step"]
    frozen = [g for g, on in policy.trainable.items() if not on]
    audit = FreezeAuditor(lambda: group_hashes(model), frozen, cfg.audit_every)
    if latents is None:
        latents = encode_bank(autoencoder, bank)
    denoise = lambda z, t, c: model(z, t, c, policy=policy)
    model.train()
    with deterministic(cfg.deterministic):
        for step in range(start, cfg.steps):
            rng, gen = step_generators(cfg.seed, step)
            idx = bank.sample_batch(rng, cfg.batch_size, cfg.fps_choices)
            z0, cond = _rectify_batch(model, latents, bank, idx, cfg.cond_drop, gen)
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            loss = diffusion_loss(denoise, z0, cond, t, eps, schedule)
            _check_finite(loss, step, "rectify")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            logger({"stage": "rectify", "step": step, "loss": loss.item(), "components": {"mse": loss.item()},
                    "lr": cfg.learning_rate})
            audit(step + 1)
        audit(cfg.steps, force=True)
    return {"stage": "rectify", "step": cfg.steps, "config": cfg.to_dict(), "policy": policy.variant,
            "model": grouped_state_dict(model), "optimizer": opt.state_dict(), "hashes": group_hashes(model),
            "losses": logger.losses}


def train_autoencoder(autoencoder: Autoencoder, bank: ClipBank, cfg: StageConfig,
                      logger: StepLog | None = None, perceptual: Callable | None = None) -> dict:
    """Pre-train the encoder and vanilla decoder frame by frame, then set the latent scale."""
    logger = logger or StepLog()
    perceptual = perceptual or PerceptualLoss()
    params = list(autoencoder.encoder.named_parameters()) + list(autoencoder.decoder.vanilla.named_parameters())
    opt = make_optimizer(params, cfg.learning_rate, cfg.weight_decay)
    frames = bank.frames.flatten(0, 1)
    with deterministic(cfg.deterministic):
        for step in range(cfg.steps):
            rng, _ = step_generators(cfg.seed, step)
            x = frames[rng.choice(len(frames), size=cfg.batch_size * 4, replace=False)]
            z, _ = autoencoder.encoder(x)
            x_hat = autoencoder.decoder.vanilla(z)
            l1 = (x - x_hat).abs().mean()
            lp = perceptual(x, x_hat)
            loss = l1 + 0.1 * lp
            _check_finite(loss, step, "autoencoder")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            logger({"stage": "autoencoder", "step": step, "loss": loss.item(),
                    "components": {"l1": l1.item(), "perceptual": lp.item()}, "lr": cfg.learning_rate})
        with torch.no_grad():
            z, _ = autoencoder.encoder(frames[:256])
            scale = float(1.0 / z.std().clamp(min=1e-6))
    autoencoder.cfg = replace(autoencoder.cfg, latent_scale=scale)
    autoencoder.decoder.cfg = autoencoder.cfg
    return {"stage": "autoencoder", "step": cfg.steps, "config": cfg.to_dict(), "latent_scale": scale,
            "losses": logger.losses}


def train_decoder(autoencoder: Autoencoder, bank: ClipBank, cfg: StageConfig, logger: StepLog | None = None,
                  perceptual: Callable | None = None, disc: nn.Module | None = None) -> dict:
    """Train the reference-injecting decoder with the encoder frozen."""
    logger = logger or StepLog()
    perceptual = perceptual or PerceptualLoss()
    torch.manual_seed(cfg.seed)
    disc = disc or PatchDiscriminator()
    autoencoder.decoder.variant = cfg.decoder_variant
    autoencoder.encoder.requires_grad_(False)
    autoencoder.decoder.requires_grad_(False)
    trainable = {id(p) for p in autoencoder.decoder.variant_parameters()}
    for p in autoencoder.decoder.parameters():
        p.requires_grad_(id(p) in trainable)
    opt = make_optimizer(autoencoder.decoder.named_parameters(), cfg.learning_rate, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cfg.lr_factor)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=cfg.disc_lr, betas=(0.5, 0.9))
    audit = FreezeAuditor(lambda: {"encoder": module_hash(autoencoder.encoder)}, ["encoder"], cfg.audit_every)
    last = autoencoder.last_layer()
    with deterministic(cfg.deterministic):
        for step in range(cfg.steps):
            rng, _ = step_generators(cfg.seed, step)
            x = bank.frames[bank.sample_batch(rng, cfg.batch_size)]
            with torch.no_grad():
                z, p1, pL = autoencoder.encode_clip(x)
            x_hat = autoencoder.decode(z, p1, pL)
            adversarial = step >= cfg.disc_start
            loss, parts = compound_loss(x, x_hat, perceptual, disc if adversarial else None, last,
                                        disc_factor=1.0 if adversarial else 0.0)
            _check_finite(loss, step, "decoder", parts)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lr = sched.get_last_lr()[0]
            sched.step()
            if adversarial:
                d_loss = hinge_d_loss(disc(x), disc(x_hat.detach()))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                parts["disc"] = d_loss.item()
            logger({"stage": "decoder", "step": step, "loss": loss.item(), "components": parts, "lr": lr})
            audit(step + 1)
        audit(cfg.steps, force=True)
    return {"stage": "decoder", "step": cfg.steps, "config": cfg.to_dict(), "variant": cfg.decoder_variant,
            "encoder_hash": module_hash(autoencoder.encoder), "losses": logger.losses, "disc": disc.state_dict()}


def sketch_bank(bank: ClipBank) -> torch.Tensor:
    """Ground-truth sketches ``(N, L, 1, H, W)`` for every frame in the bank."""
    n, L = bank.frames.shape[:2]
    flat = bank.frames.flatten(0, 1)
    return torch.stack([extract_sketch(f) for f in flat]).view(n, L, 1, *flat.shape[-2:])


def train_sketch(model: InterpDenoiser, encoder: SketchEncoder, autoencoder: Autoencoder, bank: ClipBank,
                 cfg: StageConfig, schedule: NoiseSchedule | None = None, logger: StepLog | None = None,
                 latents: torch.Tensor | None = None, sketches: torch.Tensor | None = None) -> dict:
    """Train the sketch encoder against the frozen denoiser."""
    schedule = schedule or make_schedule()
    logger = logger or StepLog()
    model.requires_grad_(False)
    opt = make_optimizer(encoder.named_parameters(), cfg.learning_rate, cfg.weight_decay)
    audit = FreezeAuditor(lambda: {"denoiser": module_hash(model)}, ["denoiser"], cfg.audit_every)
    if latents is None:
        latents = encode_bank(autoencoder, bank)
    if sketches is None:
        sketches = sketch_bank(bank)
    H, W = bank.frames.shape[-2:]
    modes = {"bisection": 0, "random": 0}
    with deterministic(cfg.deterministic):
        for step in range(cfg.steps):
            rng, gen = step_generators(cfg.seed, step)
            idx = bank.sample_batch(rng, cfg.batch_size, cfg.fps_choices)
            z0, cond = _rectify_batch(model, latents, bank, idx, 0.0, gen)
            selected = []
            for i in idx:
                full = SketchSet(list(sketches[i]))
                sparse, info = sample_training_sketches(full, rng, cfg.p_bisection)
                modes[info["mode"]] += 1
                selected.append(sparse.to_tensor(H, W))
            s = torch.stack(selected)
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            denoise = lambda z, tt, c: guided_denoise(z, tt, c, s, model, encoder)
            loss = diffusion_loss(denoise, z0, cond, t, eps, schedule)
            _check_finite(loss, step, "sketch")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total = modes["bisection"] + modes["random"]
            logger({"stage": "sketch", "step": step, "loss": loss.item(),
                    "components": {"mse": loss.item(), "bisection_ratio": modes["bisection"] / total},
                    "lr": cfg.learning_rate})
            audit(step + 1)
        audit(cfg.steps, force=True)
    return {"stage": "sketch", "step": cfg.steps, "config": cfg.to_dict(), "modes": modes,
            "encoder": {k: v.detach().clone() for k, v in encoder.state_dict().items()},
            "denoiser_hash": module_hash(model), "losses": logger.losses}
