"""Sparse sketch guidance: extraction, training-time selection and the frame-wise adapter."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import ConditionBundle, DenoiserConfig, FreezePolicy, InterpDenoiser
from .errors import ContractError
from .layers import ResBlock, sinusoidal_embedding, zero_module


class _Empty:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EMPTY"

    def __reduce__(self):
        return (_Empty, ())


EMPTY = _Empty()


def empty_sketch(H: int, W: int) -> torch.Tensor:
    """The no-stroke sketch: an all-white single-channel image."""
    return torch.ones(1, H, W)


def extract_sketch(frame: torch.Tensor, threshold: float = 0.1) -> torch.Tensor:
    """Line drawing of a ``(3, H, W)`` frame in ``[-1, 1]``.

    A pixel is drawn (value -1) when its colour differs from any 4-neighbour by
    more than ``threshold``; everything else is white (+1). Both sides of a
    colour boundary are marked.
    """
    x = frame.float()
    diff = torch.zeros(x.shape[-2:], dtype=torch.bool)
    dv = (x[:, 1:] - x[:, :-1]).abs().amax(0) > threshold
    dh = (x[:, :, 1:] - x[:, :, :-1]).abs().amax(0) > threshold
    diff[1:] |= dv
    diff[:-1] |= dv
    diff[:, 1:] |= dh
    diff[:, :-1] |= dh
    return torch.where(diff, -1.0, 1.0).unsqueeze(0)


@dataclass
class SketchSet:
    """Per-frame sketches of one clip; ``EMPTY`` marks frames without guidance."""

    sketches: list

    def __len__(self) -> int:
        return len(self.sketches)

    def present(self) -> list[int]:
        """1-based indices of frames carrying a sketch."""
        return [k + 1 for k, s in enumerate(self.sketches) if s is not EMPTY]

    def to_tensor(self, H: int, W: int) -> torch.Tensor:
        out = []
        for s in self.sketches:
            if s is EMPTY:
                out.append(empty_sketch(H, W))
            else:
                if s.shape[-2:] != (H, W):
                    raise ContractError(f"sketch size {tuple(s.shape[-2:])} != clip size {(H, W)}")
                out.append(s.reshape(1, H, W).float())
        return torch.stack(out)

    def mask(self) -> torch.Tensor:
        return torch.tensor([s is not EMPTY for s in self.sketches])

    @classmethod
    def from_frames(cls, frames: torch.Tensor) -> "SketchSet":
        return cls([extract_sketch(f) for f in frames])

    @classmethod
    def sparse(cls, L: int, mapping: dict) -> "SketchSet":
        """Build from a ``{1-based frame index: sketch}`` mapping."""
        for k in mapping:
            if not 1 <= k <= L:
                raise ContractError(f"sketch frame index {k} outside 1..{L}")
        return cls([mapping.get(k + 1, EMPTY) for k in range(L)])


def bisection_select(L: int, n: int) -> list[int]:
    """Frames picked by recursive midpoint splitting of ``(1, L)`` to depth ``n`` (1-based)."""
    if L < 3:
        return []
    chosen: set[int] = set()
    segments = [(1, L)]
    for _ in range(n):
        nxt = []
        for i, j in segments:
            m = (i + j) // 2
            if i < m < j:
                chosen.add(m)
                nxt += [(i, m), (m, j)]
        segments = nxt
    return sorted(chosen)


def sample_training_sketches(full: SketchSet, rng: np.random.Generator, p_bisection: float = 0.8,
                             mode: str | None = None, depth: int | None = None,
                             count: int | None = None) -> tuple[SketchSet, dict]:
    """Keep a bisection (probability ``p_bisection``) or random subset of interior sketches.

    ``mode``, ``depth`` and ``count`` force the corresponding random choices.
    Returns the sparse set and a record of the choice.
    """
    L = len(full)
    mode = mode or ("bisection" if rng.random() < p_bisection else "random")
    if mode == "bisection":
        depth = depth if depth is not None else int(rng.integers(1, 5))
        picked = bisection_select(L, depth)
        info = {"mode": mode, "depth": depth}
    else:
        interior = np.arange(2, L)
        if count is None:
            count = int(rng.integers(1, L - 1)) if L >= 3 else 0
        picked = sorted(int(k) for k in rng.choice(interior, size=min(count, len(interior)), replace=False))
        info = {"mode": mode, "count": count}
    keep = set(picked)
    info["frames"] = picked
    return SketchSet([s if k + 1 in keep else EMPTY for k, s in enumerate(full.sketches)]), info


class SketchEncoder(nn.Module):
    """Frame-wise adapter producing additive features for each denoiser injection site.

    Mirrors the denoiser's downsampling path. Each site ends in a zero-initialised
    1x1 conv, so a fresh encoder injects exact zeros.
    """

    def __init__(self, cfg: DenoiserConfig, image_downsample: int = 4):
        super().__init__()
        self.cfg = cfg
        self.image_downsample = image_downsample
        widths = cfg.widths
        emb_dim = 4 * cfg.base_width
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        hint = [nn.Conv2d(1, 16, 3, padding=1), nn.SiLU()]
        ch, f = 16, image_downsample
        while f > 1:
            hint += [nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.SiLU()]
            ch, f = 2 * ch, f // 2
        hint.append(nn.Conv2d(ch, widths[0], 3, padding=1))
        self.hint = nn.Sequential(*hint)
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(prev, w, emb_dim))
            prev = w
            if i + 1 < len(widths):
                self.downsample.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))
                prev = widths[i + 1]
        self.mid = ResBlock(prev, prev, emb_dim)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in cfg.injection_channels)

    def forward(self, sketch: torch.Tensor, z: torch.Tensor, t: torch.Tensor) -> list[torch.Tensor]:
        """``sketch`` ``(N, 1, H, W)``, ``z`` ``(N, C, h, w)``, ``t`` ``(N,)``: one row per frame."""
        if sketch.shape[0] != z.shape[0] or sketch.dim() != 4 or z.dim() != 4:
            raise ContractError("sketch encoder works on per-frame batches (N, 1, H, W) and (N, C, h, w)")
        emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.base_width))
        hint = self.hint(sketch)
        if hint.shape[-2:] != z.shape[-2:]:
            raise ContractError(f"sketch resolution {tuple(sketch.shape[-2:])} does not map onto latent {tuple(z.shape[-2:])}")
        x = self.conv_in(z) + hint
        outs = []
        for i, block in enumerate(self.blocks):
            x = block(x, emb)
            outs.append(self.zero_convs[i](x))
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid(x, emb)
        outs.append(self.zero_convs[-1](x))
        return outs


def sketch_forward(sketch, z_i: torch.Tensor, t: int | torch.Tensor, state: SketchEncoder) -> list[torch.Tensor]:
    """Injection features for one frame; ``sketch`` may be ``EMPTY`` (rendered white)."""
    if z_i.dim() != 3:
        raise ContractError("sketch_forward takes a single-frame latent (C, h, w)")
    H, W = z_i.shape[-2] * state.image_downsample, z_i.shape[-1] * state.image_downsample
    s = empty_sketch(H, W) if sketch is EMPTY else sketch.reshape(1, *sketch.shape[-2:]).float()
    t = torch.as_tensor(t, dtype=torch.long).reshape(1)
    return [f[0] for f in state(s.unsqueeze(0), z_i.unsqueeze(0), t)]


def clip_injections(sketches: torch.Tensor, z_t: torch.Tensor, t: torch.Tensor, state: SketchEncoder,
                    gate: torch.Tensor | None = None) -> list[torch.Tensor]:
    """Injections for a batch of clips, each frame encoded independently.

    ``sketches`` is ``(B, L, 1, H, W)``. ``gate`` (``(B, L)`` bool) zeroes the
    injection of frames without a sketch, as in the zero-gated ablation.
    """
    b, L = z_t.shape[:2]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(b)
    feats = state(sketches.flatten(0, 1), z_t.flatten(0, 1), t.repeat_interleave(L))
    if gate is not None:
        g = gate.reshape(b * L, 1, 1, 1).to(feats[0].dtype)
        feats = [f * g for f in feats]
    return feats


def guided_denoise(z_t: torch.Tensor, t, cond: ConditionBundle, sketches: torch.Tensor,
                   denoiser: InterpDenoiser, state: SketchEncoder, policy: FreezePolicy | None = None,
                   gate: torch.Tensor | None = None) -> torch.Tensor:
    """Noise prediction of the denoiser steered by per-frame sketch injections."""
    b = z_t.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(b)
    if sketches.shape[:2] != z_t.shape[:2]:
        raise ContractError("one sketch (or EMPTY) per frame is required")
    return denoiser(z_t, t, cond, policy=policy, injections=clip_injections(sketches, z_t, t, state, gate))
