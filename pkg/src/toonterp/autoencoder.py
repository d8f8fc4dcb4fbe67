"""Frame autoencoder with a dual-reference 3D decoder.

The encoder is a per-frame conv net with five residual blocks. Block ``i``
counted from the end of the encoder (``i = 1`` is the last block) produces the
feature ``F_i`` that pairs with decoder layer ``i`` (layer 1 is the first,
lowest-resolution decoder block).

The decoder adds three things on top of a vanilla per-frame decoder:

* cross-frame attention from every frame to the endpoint features in the
  shallow layers;
* zero-initialised 1x1 convs that add endpoint features to the endpoint frames
  in the deep layers;
* temporal convolutions after each resolution level.

All three start as exact identities, so a freshly built decoder reproduces the
vanilla decoder it is initialised from.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ParameterError
from .layers import Attention, ResBlock, from_tokens, norm, to_tokens, zero_module

VARIANTS = ("full", "no_p3d", "vanilla")
CHECKPOINT_FORMAT = "toonterp/autoencoder"
CHECKPOINT_VERSION = 1
SECTIONS = ("encoder", "decoder_vanilla", "decoder_har", "decoder_p3d", "disc")


@dataclass(frozen=True)
class AutoencoderConfig:
    image_channels: int = 3
    latent_channels: int = 4
    width: int = 32
    shallow_set: tuple = (1, 2)
    deep_set: tuple = (3, 4, 5)
    temporal_kernel: int = 3
    har_heads: int = 1
    latent_scale: float = 1.0

    def __post_init__(self):
        if set(self.shallow_set) & set(self.deep_set):
            raise ParameterError("shallow and deep injection sets overlap")
        if set(self.shallow_set) | set(self.deep_set) != {1, 2, 3, 4, 5}:
            raise ParameterError("shallow and deep sets must cover decoder layers 1..5")
        if self.temporal_kernel % 2 == 0 or self.temporal_kernel < 1:
            raise ParameterError(f"temporal_kernel must be odd, got {self.temporal_kernel}")

    @property
    def downsample(self) -> int:
        return 4

    def feature_channels(self, i: int) -> int:
        return self.width if i == 5 else 2 * self.width

    def feature_stride(self, i: int) -> int:
        """Downsampling factor of ``F_i`` relative to the image."""
        return {1: 4, 2: 4, 3: 4, 4: 2, 5: 1}[i]


@dataclass
class EncoderFeaturePyramid:
    """Encoder features ``{i: (B, c_i, h_i, w_i)}`` of one frame per batch element."""

    features: dict = field(default_factory=dict)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.features[i]

    def detach(self) -> "EncoderFeaturePyramid":
        return EncoderFeaturePyramid({i: f.detach() for i, f in self.features.items()})


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.width
        self.conv_in = nn.Conv2d(cfg.image_channels, w, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(w, w), ResBlock(2 * w, 2 * w), ResBlock(2 * w, 2 * w),
                                     ResBlock(2 * w, 2 * w), ResBlock(2 * w, 2 * w)])
        self.down = nn.ModuleList([nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                                   nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)])
        self.norm_out = norm(2 * w)
        self.conv_out = nn.Conv2d(2 * w, cfg.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, EncoderFeaturePyramid]:
        feats = {}
        h = self.conv_in(x)
        for k, block in enumerate(self.blocks):
            h = block(h)
            feats[5 - k] = h
            if k < len(self.down):
                h = self.down[k](h)
        return self.conv_out(F.silu(self.norm_out(h))), EncoderFeaturePyramid(feats)


class VanillaDecoder(nn.Module):
    """Per-frame decoder; ``layers[i - 1]`` is decoder layer ``i``."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        w = cfg.width
        self.conv_in = nn.Conv2d(cfg.latent_channels, 2 * w, 3, padding=1)
        self.layers = nn.ModuleList([ResBlock(2 * w, 2 * w) for _ in range(4)] + [ResBlock(w, w)])
        # upsampling happens right before layers 4 and 5
        self.up = nn.ModuleDict({"4": nn.Conv2d(2 * w, 2 * w, 3, padding=1), "5": nn.Conv2d(2 * w, w, 3, padding=1)})
        self.norm_out = norm(w)
        self.conv_out = nn.Conv2d(w, cfg.image_channels, 3, padding=1)

    def pre_layer(self, i: int, x: torch.Tensor) -> torch.Tensor:
        if str(i) in self.up:
            x = self.up[str(i)](F.interpolate(x, scale_factor=2.0, mode="nearest"))
        return x

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv_out(F.silu(self.norm_out(x)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.conv_in(z)
        for i, layer in enumerate(self.layers, start=1):
            x = layer(self.pre_layer(i, x))
        return self.head(x)


class HARLayer(nn.Module):
    """Cross-frame attention from every frame's features to the two endpoint features.

    ``G_out = G_in + out_proj(softmax(Q K^T / sqrt(d)) V)`` with queries from
    ``G_in`` and keys/values from the concatenated endpoint tokens. Both token
    sets are layer-normalised first (``normalize=True``) because encoder
    activations run an order of magnitude larger than decoder ones.
    """

    def __init__(self, channels: int, feature_channels: int, heads: int = 1, normalize: bool = True):
        super().__init__()
        self.channels = channels
        self.feature_channels = feature_channels
        self.q_norm = nn.LayerNorm(channels) if normalize else nn.Identity()
        self.kv_norm = nn.LayerNorm(feature_channels) if normalize else nn.Identity()
        self.attn = Attention(channels, feature_channels, heads=heads, zero_out=True)

    def forward(self, g_in: torch.Tensor, f1: torch.Tensor, fL: torch.Tensor) -> torch.Tensor:
        """``g_in`` is ``(B, L, c, h, w)``; ``f1``/``fL`` are ``(B, c', h', w')``."""
        b, frames, c, h, w = g_in.shape
        if c != self.channels or f1.shape[1] != self.feature_channels or f1.shape != fL.shape:
            raise ContractError(f"HAR feature dims mismatch: G {c}, F1 {tuple(f1.shape)}, FL {tuple(fL.shape)}")
        if f1.shape[0] != b:
            raise ContractError("endpoint features and decoder features differ in batch size")
        kv = self.kv_norm(torch.cat([to_tokens(f1), to_tokens(fL)], dim=1)).repeat_interleave(frames, dim=0)
        q = to_tokens(g_in.reshape(b * frames, c, h, w))
        out = q + self.attn(self.q_norm(q), kv)
        return from_tokens(out, h, w).view(b, frames, c, h, w)


def har_attend(g_in: torch.Tensor, f1: torch.Tensor, fL: torch.Tensor, layer: HARLayer,
               j: int | None = None, shallow_set=(1, 2)) -> torch.Tensor:
    if j is not None and j not in shallow_set:
        raise ContractError(f"attention injection applies only to shallow layers {shallow_set}, got {j}")
    return layer(g_in, f1, fL)


def zero_conv(in_ch: int, out_ch: int) -> nn.Conv2d:
    return zero_module(nn.Conv2d(in_ch, out_ch, 1))


class ReferenceInjector(nn.Module):
    """Group-normalised endpoint feature followed by a zero-initialised 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm = norm(in_ch)
        self.conv = zero_conv(in_ch, out_ch)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        # GroupNorm's CPU backward crashes on channels-last inputs
        return self.conv(self.norm(feature.contiguous()))


def residual_inject(g_in: torch.Tensor, feature: torch.Tensor, injector: nn.Module,
                    frame_index: int, L: int) -> torch.Tensor:
    """Add ``injector(feature)`` to one endpoint frame's features (1-based ``frame_index``)."""
    if frame_index not in (1, L):
        raise ContractError(f"residual injection only targets frames 1 and {L}, got {frame_index}")
    return injector(feature) + g_in


def _inject_endpoints(x: torch.Tensor, f1: torch.Tensor, fL: torch.Tensor, injector: nn.Module) -> torch.Tensor:
    frames = x.shape[1]
    first = residual_inject(x[:, 0], f1, injector, 1, frames)
    last = residual_inject(x[:, -1], fL, injector, frames, frames)
    if frames == 1:
        return first.unsqueeze(1)
    middle = [x[:, 1:-1]] if frames > 2 else []
    return torch.cat([first.unsqueeze(1), *middle, last.unsqueeze(1)], dim=1)


def reflect_indices(L: int, pad: int) -> torch.Tensor:
    idx = torch.arange(-pad, L + pad)
    if L == 1:
        return torch.zeros_like(idx)
    period = 2 * (L - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= L, period - idx, idx)


class P3DConv(nn.Module):
    """Channel-mixing temporal convolution with reflect padding, dirac-initialised."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0 or kernel < 1:
            raise ParameterError(f"temporal kernel must be odd, got {kernel}")
        self.kernel = kernel
        weight = torch.zeros(kernel, channels, channels)
        weight[kernel // 2] = torch.eye(channels)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(B, L, c, h, w)``."""
        frames = x.shape[1]
        if frames == 1:
            # no temporal neighbours to propagate from
            return x
        pad = self.kernel // 2
        xp = x[:, reflect_indices(frames, pad)]
        out = None
        for k in range(self.kernel):
            term = torch.einsum("oc,blchw->blohw", self.weight[k], xp[:, k:k + frames])
            out = term if out is None else out + term
        return out + self.bias.view(1, 1, -1, 1, 1)


def p3d_propagate(features: torch.Tensor, conv: P3DConv) -> torch.Tensor:
    return conv(features)


class DualRefDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig, variant: str = "full"):
        super().__init__()
        self.cfg = cfg
        self.variant = variant
        self.vanilla = VanillaDecoder(cfg)
        w = cfg.width
        layer_ch = {1: 2 * w, 2: 2 * w, 3: 2 * w, 4: 2 * w, 5: w}
        self.har = nn.ModuleDict({
            "attn": nn.ModuleDict({str(i): HARLayer(layer_ch[i], cfg.feature_channels(i), cfg.har_heads)
                                   for i in cfg.shallow_set}),
            "inject": nn.ModuleDict({str(i): ReferenceInjector(cfg.feature_channels(i), layer_ch[i])
                                    for i in cfg.deep_set}),
        })
        # one temporal conv after the last layer of each resolution level
        self.p3d = nn.ModuleDict({str(i): P3DConv(layer_ch[i], cfg.temporal_kernel) for i in (3, 4, 5)})

    @property
    def variant(self) -> str:
        return self._variant

    @variant.setter
    def variant(self, value: str) -> None:
        if value not in VARIANTS:
            raise ParameterError(f"unknown decoder variant {value!r}")
        self._variant = value

    def variant_parameters(self, variant: str | None = None) -> list[nn.Parameter]:
        variant = variant or self.variant
        params = list(self.vanilla.parameters())
        if variant in ("full", "no_p3d"):
            params += list(self.har.parameters())
        if variant == "full":
            params += list(self.p3d.parameters())
        return params

    def forward(self, latents: torch.Tensor, pyr1: EncoderFeaturePyramid | None,
                pyrL: EncoderFeaturePyramid | None) -> torch.Tensor:
        b, frames = latents.shape[:2]
        use_har = self.variant in ("full", "no_p3d")
        use_p3d = self.variant == "full"
        if use_har and (pyr1 is None or pyrL is None):
            raise ContractError("reference-injecting decoder needs both endpoint pyramids")
        van = self.vanilla
        x = van.conv_in(latents.flatten(0, 1))
        for i, layer in enumerate(van.layers, start=1):
            # references enter each layer's input so its residual block can refine them
            x = van.pre_layer(i, x)
            c, h, w = x.shape[1:]
            x = x.view(b, frames, c, h, w)
            if use_har:
                f1, fL = pyr1[i], pyrL[i]
                if f1.shape[-2:] != (h, w):
                    raise ParameterError(f"pyramid level {i} is {tuple(f1.shape[-2:])}, decoder layer is {(h, w)}")
                if i in self.cfg.shallow_set:
                    x = har_attend(x, f1, fL, self.har["attn"][str(i)], i, self.cfg.shallow_set)
                else:
                    x = _inject_endpoints(x, f1, fL, self.har["inject"][str(i)])
            x = layer(x.flatten(0, 1))
            if use_p3d and str(i) in self.p3d:
                x = p3d_propagate(x.view(b, frames, *x.shape[1:]), self.p3d[str(i)]).flatten(0, 1)
        out = van.head(x)
        return out.view(b, frames, *out.shape[1:])


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig = AutoencoderConfig(), variant: str = "full"):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = DualRefDecoder(cfg, variant)

    @property
    def latent_scale(self) -> float:
        return self.cfg.latent_scale

    def check_frames(self, x: torch.Tensor) -> None:
        f = self.cfg.downsample
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ParameterError(f"frame size {tuple(x.shape[-2:])} not divisible by {f}")

    def encode(self, frame: torch.Tensor) -> tuple[torch.Tensor, EncoderFeaturePyramid]:
        """Encode ``(N, 3, H, W)`` (or a single ``(3, H, W)``) frames in ``[-1, 1]``."""
        self.check_frames(frame)
        single = frame.dim() == 3
        if single:
            frame = frame.unsqueeze(0)
        z, pyr = self.encoder(frame)
        z = z * self.latent_scale
        if single:
            return z[0], EncoderFeaturePyramid({i: f[0] for i, f in pyr.features.items()})
        return z, pyr

    def encode_clip(self, frames: torch.Tensor):
        """Encode ``(B, L, 3, H, W)`` clips; returns latents and the two endpoint pyramids."""
        b, L = frames.shape[:2]
        z, pyr = self.encode(frames.flatten(0, 1))
        z = z.view(b, L, *z.shape[1:])
        pick = lambda k: EncoderFeaturePyramid({i: f.view(b, L, *f.shape[1:])[:, k] for i, f in pyr.features.items()})
        return z, pick(0), pick(L - 1)

    def decode(self, latents: torch.Tensor, pyr1: EncoderFeaturePyramid | None = None,
               pyrL: EncoderFeaturePyramid | None = None) -> torch.Tensor:
        """Decode ``(B, L, C, h, w)`` latents to ``(B, L, 3, H, W)`` frames."""
        single = latents.dim() == 4
        if single:
            latents = latents.unsqueeze(0)
            lift = lambda p: None if p is None else EncoderFeaturePyramid({i: f.unsqueeze(0) for i, f in p.features.items()})
            pyr1, pyrL = lift(pyr1), lift(pyrL)
        out = self.decoder(latents / self.latent_scale, pyr1, pyrL)
        return out[0] if single else out

    def decode_vanilla(self, latents: torch.Tensor) -> torch.Tensor:
        shape = latents.shape
        out = self.decoder.vanilla(latents.reshape(-1, *shape[-3:]) / self.latent_scale)
        return out.view(*shape[:-3], *out.shape[1:])

    def last_layer(self) -> nn.Parameter:
        return self.decoder.vanilla.conv_out.weight


class PerceptualLoss(nn.Module):
    """Feature-space distance under a fixed, seeded, randomly initialised conv net.

    Stands in for LPIPS; any callable ``(x, y) -> scalar`` can be used instead.
    """

    def __init__(self, seed: int = 0, channels=(16, 32, 64)):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        layers, prev = [], 3
        for k, ch in enumerate(channels):
            layers.append(nn.Conv2d(prev, ch, 3, stride=1 if k == 0 else 2, padding=1))
            prev = ch
        torch.random.set_rng_state(gen_state)
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x, y = x.reshape(-1, *x.shape[-3:]), y.reshape(-1, *y.shape[-3:])
        total = x.new_zeros(())
        for layer in self.layers:
            x, y = F.relu(layer(x)), F.relu(layer(y))
            nx = x / (x.pow(2).sum(1, keepdim=True).sqrt() + 1e-8)
            ny = y / (y.pow(2).sum(1, keepdim=True).sqrt() + 1e-8)
            total = total + (nx - ny).pow(2).sum(1).mean()
        return total


class PatchDiscriminator(nn.Module):
    def __init__(self, in_ch: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.GroupNorm(8, 2 * width), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.reshape(-1, *x.shape[-3:]))


def hinge_d_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * (F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean())


def adaptive_weight(rec_loss: torch.Tensor, g_loss: torch.Tensor, last_layer: torch.Tensor,
                    max_weight: float = 1e4) -> torch.Tensor:
    """Balance the adversarial term by the gradient-norm ratio at the decoder's last layer."""
    rec_grad = torch.autograd.grad(rec_loss, last_layer, retain_graph=True)[0]
    g_grad = torch.autograd.grad(g_loss, last_layer, retain_graph=True)[0]
    weight = rec_grad.norm() / (g_grad.norm() + 1e-4)
    return weight.clamp(0.0, max_weight).detach()


def compound_loss(x: torch.Tensor, x_hat: torch.Tensor, perceptual: Callable, disc: nn.Module | None = None,
                  last_layer: torch.Tensor | None = None, disc_factor: float = 1.0,
                  perceptual_weight: float = 0.1) -> tuple[torch.Tensor, dict]:
    """Reconstruction loss ``L1 + 0.1 * perceptual + lambda_d * adversarial``.

    The adversarial term is skipped (``lambda_d = 0``) when ``disc`` is ``None``
    or ``disc_factor`` is zero, e.g. during the discriminator warm-up.
    """
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l1 = (x - x_hat).abs().mean()
    lp = perceptual(x, x_hat)
    rec = l1 + perceptual_weight * lp
    adv = x.new_zeros(())
    lam = x.new_zeros(())
    if disc is not None and disc_factor > 0:
        adv = -disc(x_hat).mean()
        if last_layer is None:
            raise ContractError("adaptive adversarial weight needs the decoder's last layer")
        lam = adaptive_weight(rec, adv, last_layer)
    total = rec + disc_factor * lam * adv
    parts = {"l1": l1.item(), "perceptual": lp.item(), "adv": adv.item(), "lambda_d": lam.item(), "total": total.item()}
    return total, parts


def section_of(name: str) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("decoder.vanilla."):
        return "decoder_vanilla"
    if name.startswith("decoder.har."):
        return "decoder_har"
    if name.startswith("decoder.p3d."):
        return "decoder_p3d"
    raise ContractError(f"parameter {name!r} belongs to no checkpoint section")


def save_autoencoder(ae: Autoencoder, path: str | Path, disc: nn.Module | None = None,
                     sections=SECTIONS, extra: dict | None = None) -> None:
    tensors = {}
    for name, t in ae.state_dict().items():
        sec = section_of(name)
        if sec in sections:
            tensors[f"{sec}/{name.split('.', 2 if sec != 'encoder' else 1)[-1]}"] = t.detach().clone()
    if disc is not None and "disc" in sections:
        tensors.update({f"disc/{k}": v.detach().clone() for k, v in disc.state_dict().items()})
    cfg = asdict(ae.cfg)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": cfg,
                "variant": ae.decoder.variant, "tensors": tensors, "extra": extra or {}}, path)


def load_autoencoder(path: str | Path, disc: nn.Module | None = None) -> Autoencoder:
    """Load whatever sections the file holds; missing decoder sections keep their identity init."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not an autoencoder checkpoint")
    cfg = dict(blob["config"])
    cfg["shallow_set"], cfg["deep_set"] = tuple(cfg["shallow_set"]), tuple(cfg["deep_set"])
    ae = Autoencoder(AutoencoderConfig(**cfg), blob.get("variant", "full"))
    prefix = {"encoder": "encoder.", "decoder_vanilla": "decoder.vanilla.", "decoder_har": "decoder.har.",
              "decoder_p3d": "decoder.p3d."}
    state, disc_state = {}, {}
    for key, t in blob["tensors"].items():
        sec, rest = key.split("/", 1)
        if sec == "disc":
            disc_state[rest] = t
        else:
            state[prefix[sec] + rest] = t
    if "encoder.conv_in.weight" not in state or "decoder.vanilla.conv_in.weight" not in state:
        raise ContractError(f"{path} lacks the encoder or vanilla decoder section")
    ae.load_state_dict(state, strict=False)
    if disc is not None and disc_state:
        disc.load_state_dict(disc_state)
    return ae
