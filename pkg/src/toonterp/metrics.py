"""Reconstruction metrics and per-variant evaluation reports."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError

PSNR_CAP = 99.0


def _unit(x: torch.Tensor) -> torch.Tensor:
    return (x.double() + 1.0) / 2.0


def _check(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """PSNR in dB of two images in ``[-1, 1]``, measured on the ``[0, 1]`` rescaling.

    Identical inputs give ``PSNR_CAP`` instead of infinity.
    """
    _check(x, y)
    mse = float(((_unit(x) - _unit(y)) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    g = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(g ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of ``(..., C, H, W)`` images in ``[-1, 1]`` (Gaussian window, valid region only)."""
    _check(x, y)
    if x.dim() < 2 or min(x.shape[-2:]) < window:
        raise ContractError(f"images must be at least {window}x{window}")
    a = _unit(x).reshape(-1, 1, *x.shape[-2:])
    b = _unit(y).reshape(-1, 1, *y.shape[-2:])
    w = _gaussian_window(window, sigma)[None, None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = F.conv2d(a, w), F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a ** 2
    var_b = F.conv2d(b * b, w) - mu_b ** 2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass
class MetricReport:
    """Per-clip and aggregate scores of one variant; ``curve[k]`` is the mean PSNR at frame ``k + 1``."""

    variant: str
    clip_psnr: list[float] = field(default_factory=list)
    clip_ssim: list[float] = field(default_factory=list)
    curve: list[float] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.clip_psnr)) if self.clip_psnr else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean(self.clip_ssim)) if self.clip_ssim else float("nan")

    def to_dict(self) -> dict:
        return {**asdict(self), "psnr": self.psnr, "ssim": self.ssim}


def clip_scores(x: torch.Tensor, x_hat: torch.Tensor) -> tuple[list[float], float, float]:
    """Per-frame PSNR of an ``(L, 3, H, W)`` clip plus its clip-level PSNR and SSIM (frame means)."""
    _check(x, x_hat)
    frames = [psnr(a, b) for a, b in zip(x, x_hat)]
    return frames, float(np.mean(frames)), float(np.mean([ssim(a, b) for a, b in zip(x, x_hat)]))


def report_from_reconstructions(variant: str, clips: torch.Tensor, recons: torch.Tensor) -> MetricReport:
    rep = MetricReport(variant)
    per_frame = []
    for x, x_hat in zip(clips, recons):
        frames, p, s = clip_scores(x, x_hat)
        per_frame.append(frames)
        rep.clip_psnr.append(p)
        rep.clip_ssim.append(s)
    rep.curve = np.mean(per_frame, axis=0).tolist()
    return rep


@torch.no_grad()
def reconstruct(autoencoder, frames: torch.Tensor, variant: str | None = None, chunk: int = 8) -> torch.Tensor:
    """Encode and decode ``(N, L, 3, H, W)`` clips with the given decoder variant."""
    dec = autoencoder.decoder
    previous = dec.variant
    if variant is not None:
        dec.variant = variant
    try:
        out = []
        for i in range(0, len(frames), chunk):
            z, p1, pL = autoencoder.encode_clip(frames[i:i + chunk])
            out.append(autoencoder.decode(z, p1, pL).clamp(-1, 1))
    finally:
        dec.variant = previous
    return torch.cat(out)


def evaluate_decoder(autoencoder, frames: torch.Tensor, variant: str | None = None) -> MetricReport:
    variant = variant or autoencoder.decoder.variant
    return report_from_reconstructions(variant, frames, reconstruct(autoencoder, frames, variant))


def frame_index_curve(autoencoder, frames: torch.Tensor, variant: str | None = None) -> list[float]:
    """Mean reconstruction PSNR at each frame index (length ``L``)."""
    return evaluate_decoder(autoencoder, frames, variant).curve
