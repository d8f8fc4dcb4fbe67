"""Noise schedules, forward noising, the epsilon objective and a guided DDIM sampler.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and ``t = 0`` denotes
clean data (cumulative alpha of exactly one).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import torch
import torch.nn.functional as F

from .errors import ContractError, ParameterError

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    def abar(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative alpha at 1-based timestep(s) ``t``; ``t = 0`` maps to 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([torch.ones(1, dtype=self.alphas_cumprod.dtype), self.alphas_cumprod])
        return padded[t]


def make_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2,
                  kind: str = "scaled_linear") -> NoiseSchedule:
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=torch.float64) ** 2
        betas[0], betas[-1] = beta_start, beta_end
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, betas=betas, alphas_cumprod=torch.cumprod(1.0 - betas, dim=0))


def _coef(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    values = values.to(like.dtype)
    if values.dim() == 0:
        return values
    return values.view(-1, *([1] * (like.dim() - 1)))


def _check_t(t: int | torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (t.min() < 1 or t.max() > schedule.T):
        raise ParameterError(f"timestep must lie in [1, {schedule.T}], got {t.tolist()}")
    return t


def q_sample(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal sample ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar or a per-sample tensor matching ``z0``'s leading dim.
    """
    if eps.shape != z0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = _check_t(t, schedule)
    abar = schedule.abar(t)
    return _coef(abar.sqrt(), z0) * z0 + _coef((1 - abar).sqrt(), z0) * eps


def _batched_t(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch).clone() if t.dim() == 0 else t


def diffusion_loss(denoiser: Denoiser, z0: torch.Tensor, cond: Any, t: int | torch.Tensor,
                   eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the true noise and the denoiser's prediction."""
    z_t = q_sample(z0, t, eps, schedule)
    pred = denoiser(z_t, _batched_t(t, z0.shape[0]), cond)
    if pred.shape != eps.shape:
        raise ContractError(f"prediction shape {tuple(pred.shape)} != noise shape {tuple(eps.shape)}")
    return F.mse_loss(pred, eps)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError("conditional and unconditional predictions differ in shape")
    if w == 1:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class DDIMConfig:
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0
    seed: int = 0


def ddim_timesteps(num_steps: int, T: int) -> list[int]:
    """Strictly decreasing timesteps with uniform stride, starting at ``T``."""
    if not 1 <= num_steps <= T:
        raise ParameterError(f"num_steps must lie in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return [T - k * stride for k in range(num_steps)]


@torch.no_grad()
def ddim_sample(denoiser: Denoiser, shape: tuple[int, ...], cond: Any, cfg: DDIMConfig,
                schedule: NoiseSchedule, uncond: Any = None, x_T: torch.Tensor | None = None,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Run DDIM from ``x_T`` (or seeded Gaussian noise) down to a clean estimate.

    When ``guidance_scale != 1`` the null condition is ``uncond`` if given,
    otherwise ``cond.null()``.
    """
    timesteps = ddim_timesteps(cfg.num_steps, schedule.T)
    if cfg.eta < 0:
        raise ParameterError("eta must be >= 0")
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn(shape, generator=gen, dtype=dtype) if x_T is None else x_T.clone()
    if cfg.guidance_scale != 1 and uncond is None:
        uncond = cond.null()
    batch = shape[0]
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        tt = torch.full((batch,), t, dtype=torch.long)
        eps = denoiser(z, tt, cond)
        if cfg.guidance_scale != 1:
            eps = cfg_combine(eps, denoiser(z, tt, uncond), cfg.guidance_scale)
        a_t = schedule.abar(t).to(z.dtype)
        a_prev = schedule.abar(t_prev).to(z.dtype)
        x0 = (z - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        sigma = cfg.eta * ((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)).sqrt()
        z = a_prev.sqrt() * x0 + (1 - a_prev - sigma ** 2).clamp(min=0).sqrt() * eps
        if cfg.eta > 0 and t_prev > 0:
            z = z + sigma * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return z
