"""Image-to-video interpolation denoiser.

The network is split into three parameter groups that the freeze policies act on:

* ``icp``: the image-context projector turning the two endpoint frames into
  context tokens for cross-attention;
* ``spatial``: everything that processes frames one at a time (conv residual
  blocks, spatial self-attention, cross-attention, embeddings, in/out convs);
* ``temporal``: attention across the frame axis at each spatial location.

Every parameter name starts with its group prefix, which is what checkpoints
and freeze audits key on.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ParameterError
from .layers import Attention, ResBlock, from_tokens, norm, sinusoidal_embedding, to_tokens

GROUPS = ("ICP", "Spatial", "Temporal")
_PREFIX = {"icp": "ICP", "spatial": "Spatial", "temporal": "Temporal"}
CHECKPOINT_FORMAT = "toonterp/denoiser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    frame_count: int = 16
    latent_channels: int = 4
    base_width: int = 64
    num_levels: int = 2
    context_tokens: int = 8
    context_dim: int = 64
    text_vocab_size: int = 64
    fps_embed_dim: int = 64
    image_channels: int = 3
    icp_width: int = 32
    heads: int = 4

    def __post_init__(self):
        if self.frame_count < 2:
            raise ParameterError("frame_count must be >= 2")
        for name in ("latent_channels", "base_width", "num_levels", "context_tokens", "context_dim",
                     "text_vocab_size", "fps_embed_dim", "icp_width"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        per_frame = self.context_tokens // 2
        if self.context_tokens % 2 or math.isqrt(per_frame) ** 2 != per_frame:
            raise ParameterError("context_tokens must be twice a perfect square (tokens per endpoint on a square grid)")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.num_levels)]

    @property
    def injection_channels(self) -> list[int]:
        """Channel count at each sketch-injection site: one per level, then the middle block."""
        return self.widths + [self.widths[-1]]


@dataclass(frozen=True)
class FreezePolicy:
    variant: str
    trainable: dict = field(default_factory=dict)
    bypass_temporal: bool = False

    @classmethod
    def from_variant(cls, variant: str) -> "FreezePolicy":
        table = {
            "I": (False, False, False, False),
            "II": (True, True, True, False),
            "III": (True, True, False, True),
            "IV": (True, True, False, False),
            "V": (True, False, False, False),
        }
        if variant not in table:
            raise ParameterError(f"unknown freeze variant {variant!r}; expected one of {sorted(table)}")
        icp, spatial, temporal, bypass = table[variant]
        return cls(variant, {"ICP": icp, "Spatial": spatial, "Temporal": temporal}, bypass)


@dataclass
class ConditionBundle:
    """Conditioning for one batch of clips.

    ``c_img`` is ``(B, L, C + 1, h, w)``: endpoint latents in the first and last
    slots, zeros elsewhere, and a presence-mask channel last.
    """

    c_img: torch.Tensor
    c_ctx: torch.Tensor
    c_txt: torch.Tensor
    fps: torch.Tensor

    @property
    def frame_count(self) -> int:
        return self.c_img.shape[1]

    def null(self) -> "ConditionBundle":
        # endpoints stay: they define the interpolation task itself
        return replace(self, c_ctx=torch.zeros_like(self.c_ctx), c_txt=torch.zeros_like(self.c_txt))

    def repeat(self, n: int) -> "ConditionBundle":
        return ConditionBundle(*(x.repeat_interleave(n, dim=0) for x in (self.c_img, self.c_ctx, self.c_txt, self.fps)))


class ImageContextProjector(nn.Module):
    """Small conv encoder mapping the two endpoint frames to context tokens."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.icp_width
        self.grid = math.isqrt(cfg.context_tokens // 2)
        self.net = nn.Sequential(
            nn.Conv2d(cfg.image_channels, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, cfg.context_dim, 3, padding=1),
        )
        self.frame_embed = nn.Parameter(torch.randn(2, 1, cfg.context_dim) * 0.02)
        self.proj = nn.Sequential(nn.LayerNorm(cfg.context_dim), nn.Linear(cfg.context_dim, cfg.context_dim))

    def forward(self, x1: torch.Tensor, xL: torch.Tensor) -> torch.Tensor:
        feats = self.net(torch.cat([x1, xL], dim=0))
        tokens = to_tokens(F.adaptive_avg_pool2d(feats, self.grid))
        t1, tL = tokens.chunk(2, dim=0)
        return self.proj(torch.cat([t1 + self.frame_embed[0], tL + self.frame_embed[1]], dim=1))


class SpatialBlock(nn.Module):
    """Per-frame residual conv, self-attention and cross-attention to the context tokens."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.norm_self = nn.LayerNorm(out_ch)
        self.self_attn = Attention(out_ch, heads=heads)
        self.norm_cross = nn.LayerNorm(out_ch)
        self.cross_attn = Attention(out_ch, ctx_dim, heads=heads)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = self.res(x, emb)
        h, w = x.shape[-2:]
        tok = to_tokens(x)
        tok = tok + self.self_attn(self.norm_self(tok))
        tok = tok + self.cross_attn(self.norm_cross(tok), context)
        return from_tokens(tok, h, w)


class TemporalBlock(nn.Module):
    """Attention along the frame axis, independently at every spatial location.

    The output projection is zero-initialised, so a fresh block is the identity.
    """

    def __init__(self, ch: int, max_frames: int, heads: int):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(max_frames, ch) * 0.02)
        self.norm = nn.LayerNorm(ch)
        self.attn = Attention(ch, heads=heads, zero_out=True)

    def forward(self, x: torch.Tensor, frames: int) -> torch.Tensor:
        bl, c, h, w = x.shape
        if frames > self.pos.shape[0]:
            raise ContractError(f"clip has {frames} frames, temporal block supports {self.pos.shape[0]}")
        tok = x.view(bl // frames, frames, c, h * w).permute(0, 3, 1, 2).reshape(-1, frames, c)
        tok = tok + self.attn(self.norm(tok + self.pos[:frames]))
        return tok.view(bl // frames, h * w, frames, c).permute(0, 2, 3, 1).reshape(bl, c, h, w)


class SpatialStack(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        widths = cfg.widths
        emb_dim = 4 * cfg.base_width
        c = cfg.latent_channels
        self.base_width = cfg.base_width
        self.fps_embed_dim = cfg.fps_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.fps_mlp = nn.Sequential(nn.Linear(cfg.fps_embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.txt_embed = nn.Embedding(cfg.text_vocab_size, cfg.context_dim, padding_idx=0)
        self.conv_in = nn.Conv2d(2 * c + 1, widths[0], 3, padding=1)
        blk = lambda i, o: SpatialBlock(i, o, emb_dim, cfg.context_dim, cfg.heads)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(blk(prev, w))
            prev = w
            if i + 1 < len(widths):
                self.downsample.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))
                prev = widths[i + 1]
        self.mid = blk(widths[-1], widths[-1])
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up.append(blk(prev + widths[i], widths[i]))
            prev = widths[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
                prev = widths[i - 1]
        self.norm_out = norm(widths[0])
        self.conv_out = nn.Conv2d(widths[0], c, 3, padding=1)

    def embed(self, t: torch.Tensor, fps: torch.Tensor) -> torch.Tensor:
        return (self.time_mlp(sinusoidal_embedding(t, self.base_width))
                + self.fps_mlp(sinusoidal_embedding(fps, self.fps_embed_dim)))


class InterpDenoiser(nn.Module):
    """Epsilon-prediction network for ``(B, L, C, h, w)`` latent clips."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.icp = ImageContextProjector(cfg)
        self.spatial = SpatialStack(cfg)
        chans = cfg.widths + [cfg.widths[-1]] + list(reversed(cfg.widths))
        self.temporal = nn.ModuleList(TemporalBlock(ch, cfg.frame_count, cfg.heads) for ch in chans)
        parameter_groups(self)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor | int, cond: ConditionBundle,
                policy: FreezePolicy | None = None,
                injections: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
        squeeze = z_t.dim() == 4
        if squeeze:
            z_t = z_t.unsqueeze(0)
        b, frames, c, h, w = z_t.shape
        if cond.c_img.shape != (b, frames, c + 1, h, w):
            raise ContractError(f"c_img shape {tuple(cond.c_img.shape)} incompatible with z_t {tuple(z_t.shape)}")
        if c != self.cfg.latent_channels:
            raise ContractError(f"expected {self.cfg.latent_channels} latent channels, got {c}")
        down_factor = 2 ** (self.cfg.num_levels - 1)
        if h % down_factor or w % down_factor:
            raise ContractError(f"latent size {h}x{w} not divisible by {down_factor}")
        bypass = policy is not None and policy.bypass_temporal
        sp = self.spatial
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(b)
        emb = sp.embed(t, cond.fps).repeat_interleave(frames, dim=0)
        context = torch.cat([cond.c_ctx, sp.txt_embed(cond.c_txt)], dim=1).repeat_interleave(frames, dim=0)

        temporal = iter(self.temporal)

        def temporal_step(x):
            block = next(temporal)
            return x if bypass else block(x, frames)

        x = torch.cat([z_t, cond.c_img], dim=2).reshape(b * frames, 2 * c + 1, h, w)
        x = sp.conv_in(x)
        skips = []
        for i, block in enumerate(sp.down):
            x = block(x, emb, context)
            if injections is not None:
                x = x + injections[i]
            x = temporal_step(x)
            skips.append(x)
            if i < len(sp.downsample):
                x = sp.downsample[i](x)
        x = sp.mid(x, emb, context)
        if injections is not None:
            x = x + injections[len(sp.down)]
        x = temporal_step(x)
        for i, block in enumerate(sp.up):
            x = block(torch.cat([x, skips.pop()], dim=1), emb, context)
            x = temporal_step(x)
            if i < len(sp.upsample):
                x = sp.upsample[i](F.interpolate(x, scale_factor=2.0, mode="nearest"))
        out = sp.conv_out(F.silu(sp.norm_out(x))).view(b, frames, c, h, w)
        return out.squeeze(0) if squeeze else out


def parameter_groups(model: InterpDenoiser) -> dict[str, list[nn.Parameter]]:
    groups: dict[str, list[nn.Parameter]] = {g: [] for g in GROUPS}
    for name, p in model.named_parameters():
        prefix = name.split(".", 1)[0]
        assert prefix in _PREFIX, f"parameter {name!r} belongs to no group"
        groups[_PREFIX[prefix]].append(p)
    return groups


def named_parameter_groups(model: nn.Module) -> dict[str, dict[str, nn.Parameter]]:
    groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUPS}
    for name, p in model.named_parameters():
        groups[_PREFIX[name.split(".", 1)[0]]][name] = p
    return groups


def apply_freeze_policy(model: InterpDenoiser, policy: FreezePolicy) -> None:
    for group, params in parameter_groups(model).items():
        for p in params:
            p.requires_grad_(policy.trainable[group])


def build_condition_from_latents(z1: torch.Tensor, zL: torch.Tensor, x1: torch.Tensor, xL: torch.Tensor,
                                 L: int, icp: ImageContextProjector, caption, fps) -> ConditionBundle:
    """Assemble a bundle from already-encoded endpoint latents ``(B, C, h, w)``."""
    if L < 2:
        raise ParameterError("L must be >= 2")
    if z1.shape != zL.shape or x1.shape != xL.shape:
        raise ParameterError("first and last frames differ in size")
    b, c, h, w = z1.shape
    c_img = z1.new_zeros(b, L, c + 1, h, w)
    c_img[:, 0, :c] = z1
    c_img[:, -1, :c] = zL
    c_img[:, 0, c] = 1
    c_img[:, -1, c] = 1
    caption = torch.as_tensor(caption, dtype=torch.long)
    if caption.dim() == 1:
        caption = caption.expand(b, -1)
    fps = torch.as_tensor(fps, dtype=torch.long)
    if fps.dim() == 0:
        fps = fps.expand(b)
    return ConditionBundle(c_img=c_img, c_ctx=icp(x1, xL), c_txt=caption.clone(), fps=fps.clone())


def build_condition(x1: torch.Tensor, xL: torch.Tensor, L: int, autoencoder, icp: ImageContextProjector,
                    caption, fps) -> ConditionBundle:
    """Condition a clip of ``L`` frames on its first and last frames ``(B, 3, H, W)``."""
    if x1.shape != xL.shape:
        raise ParameterError(f"endpoint frames differ in size: {tuple(x1.shape)} vs {tuple(xL.shape)}")
    unbatched = x1.dim() == 3
    if unbatched:
        x1, xL = x1.unsqueeze(0), xL.unsqueeze(0)
    with torch.no_grad():
        z1, _ = autoencoder.encode(x1)
        zL, _ = autoencoder.encode(xL)
    return build_condition_from_latents(z1, zL, x1, xL, L, icp, caption, fps)


def grouped_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k.replace(".", "/", 1): v.detach().clone() for k, v in model.state_dict().items()}


def save_denoiser(model: InterpDenoiser, path: str | Path, extra: dict | None = None) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
                "tensors": grouped_state_dict(model), "extra": extra or {}}, path)


def load_denoiser(path: str | Path, groups: Iterable[str] | None = None,
                  model: InterpDenoiser | None = None) -> InterpDenoiser:
    """Load a denoiser checkpoint; ``groups`` restricts which parameter groups are restored."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a denoiser checkpoint")
    model = model or InterpDenoiser(DenoiserConfig(**blob["config"]))
    wanted = set(groups) if groups is not None else set(GROUPS)
    state = {k.replace("/", ".", 1): v for k, v in blob["tensors"].items() if _PREFIX[k.split("/", 1)[0]] in wanted}
    model.load_state_dict(state, strict=groups is None)
    return model
