"""Ablation suites: decoder variants ranked by reconstruction PSNR, rectify variants by held-out loss."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autoencoder import Autoencoder, VARIANTS, load_autoencoder, save_autoencoder
from .config import StageConfig
from .data import ClipBank
from .denoiser import FreezePolicy, InterpDenoiser, build_condition_from_latents, load_denoiser, save_denoiser
from .diffusion import NoiseSchedule, diffusion_loss, make_schedule
from .errors import ConfigError
from .metrics import MetricReport, evaluate_decoder
from .trainer import encode_bank, train_decoder, train_rectify

SUITES = ("decoder_variants", "rectify_variants")
DECODER_ORDER = ("full", "no_p3d", "vanilla")
RECTIFY_VARIANTS = ("I", "II", "III", "IV", "V")
MIN_GAP_DB = 0.2
CURVE_SLACK_DB = 0.1


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    fatal: bool = True


@dataclass
class AblationReport:
    suite: str
    rows: dict = field(default_factory=dict)  # label -> metric dict
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.fatal)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "rows": self.rows, "checks": [asdict(c) for c in self.checks],
                "passed": self.passed}

    def table(self) -> str:
        cols = sorted({k for r in self.rows.values() for k, v in r.items() if isinstance(v, (int, float))})
        lines = ["variant   " + "".join(f"{c:>14}" for c in cols)]
        for label, row in self.rows.items():
            lines.append(f"{label:<10}" + "".join(f"{row.get(c, float('nan')):>14.4f}" for c in cols))
        lines.append("")
        for c in self.checks:
            tag = "PASS" if c.passed else ("FAIL" if c.fatal else "WARN")
            lines.append(f"[{tag}] {c.name}: {c.detail}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{self.suite}.json").write_text(json.dumps(self.to_dict(), indent=2))
        (directory / f"{self.suite}.txt").write_text(self.table())


def curve_check(curve: list[float], slack: float = CURVE_SLACK_DB) -> Check:
    """Endpoints at least as good as every middle frame (up to ``slack``) and above the curve minimum.

    A two-frame curve has nothing to compare against and passes.
    """
    ends = [curve[0], curve[-1]]
    middle = curve[1:-1]
    lowest = min(curve)
    ok = not middle or (min(ends) >= max(middle) - slack and all(e > lowest for e in ends))
    return Check("frame-index curve", ok,
                 f"endpoints {ends[0]:.3f}/{ends[1]:.3f}, middle max {max(middle) if middle else float('nan'):.3f}, "
                 f"min {lowest:.3f}")


def _require(checkpoints: dict, labels) -> None:
    missing = [v for v in labels if v not in checkpoints or not Path(checkpoints[v]).is_file()]
    if missing:
        raise ConfigError(f"missing checkpoints for variants {missing}")


def evaluate_decoder_suite(checkpoints: dict, eval_frames: torch.Tensor, min_gap: float = MIN_GAP_DB) -> AblationReport:
    _require(checkpoints, DECODER_ORDER)
    reports: dict[str, MetricReport] = {}
    for v in DECODER_ORDER:
        reports[v] = evaluate_decoder(load_autoencoder(checkpoints[v]), eval_frames, v)
    rep = AblationReport("decoder_variants", {v: {**r.to_dict(), "variant": v} for v, r in reports.items()})
    for hi, lo in zip(DECODER_ORDER, DECODER_ORDER[1:]):
        gap = reports[hi].psnr - reports[lo].psnr
        rep.checks.append(Check(f"PSNR({hi}) >= PSNR({lo}) + {min_gap}", gap >= min_gap, f"gap {gap:.3f} dB"))
    rep.checks.append(curve_check(reports["full"].curve))
    return rep


@torch.no_grad()
def proxy_loss(model: InterpDenoiser, autoencoder: Autoencoder, bank: ClipBank, policy: FreezePolicy,
               schedule: NoiseSchedule, seed: int = 0, timesteps_per_clip: int = 8, latents=None) -> float:
    """Held-out diffusion loss at a fixed, seeded set of timesteps and noises."""
    model.eval()
    if latents is None:
        latents = encode_bank(autoencoder, bank)
    gen = torch.Generator().manual_seed(seed)
    # stratified timesteps so every clip sees the whole noise range
    strata = np.linspace(1, schedule.T, timesteps_per_clip + 1)
    losses = []
    for i in range(len(bank)):
        idx = np.array([i] * timesteps_per_clip)
        z0 = latents[idx]
        x = bank.frames[idx]
        cond = build_condition_from_latents(z0[:, 0], z0[:, -1], x[:, 0], x[:, -1], z0.shape[1], model.icp,
                                            bank.captions[idx], bank.fps[idx])
        t = torch.tensor([int(np.clip(round(0.5 * (a + b)), 1, schedule.T)) for a, b in zip(strata, strata[1:])])
        eps = torch.randn(z0.shape, generator=gen)
        losses.append(diffusion_loss(lambda z, tt, c: model(z, tt, c, policy=policy), z0, cond, t, eps, schedule).item())
    return float(np.mean(losses))


def evaluate_rectify_suite(checkpoints: dict, autoencoder: Autoencoder, eval_bank: ClipBank,
                           schedule: NoiseSchedule | None = None, seed: int = 0) -> AblationReport:
    _require(checkpoints, [v for v in ("II", "IV")])
    schedule = schedule or make_schedule()
    latents = encode_bank(autoencoder, eval_bank)
    rows = {}
    for v in RECTIFY_VARIANTS:
        if v not in checkpoints:
            continue
        if not Path(checkpoints[v]).is_file():
            raise ConfigError(f"missing checkpoint for variant {v}: {checkpoints[v]}")
        model = load_denoiser(checkpoints[v])
        rows[v] = {"variant": v, "proxy_loss": proxy_loss(model, autoencoder, eval_bank, FreezePolicy.from_variant(v),
                                                          schedule, seed, latents=latents)}
    rep = AblationReport("rectify_variants", rows)
    a, b = rows["IV"]["proxy_loss"], rows["II"]["proxy_loss"]
    rep.checks.append(Check("proxy_loss(IV) <= proxy_loss(II)", a <= b, f"{a:.5f} vs {b:.5f}", fatal=False))
    return rep


def run_ablation(suite: str, checkpoints: dict, eval_bank: ClipBank, autoencoder: Autoencoder | None = None,
                 seed: int = 0, min_gap: float = MIN_GAP_DB) -> AblationReport:
    """Evaluate trained variant checkpoints and check the expected ordering.

    Decoder orderings are fatal (``report.passed``); the rectify ordering is
    reported as advisory only.
    """
    if suite == "decoder_variants":
        return evaluate_decoder_suite(checkpoints, eval_bank.frames, min_gap)
    if suite == "rectify_variants":
        if autoencoder is None:
            raise ConfigError("rectify suite needs the autoencoder to encode eval clips")
        return evaluate_rectify_suite(checkpoints, autoencoder, eval_bank, seed=seed)
    raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")


def train_decoder_suite(base: Autoencoder, bank: ClipBank, budget: StageConfig, out_dir: str | Path) -> dict:
    """Train every decoder variant from the same vanilla initialisation with the same budget."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for v in DECODER_ORDER:
        ae = copy.deepcopy(base)
        cfg = StageConfig.from_mapping({**budget.to_dict(), "stage": "decoder", "decoder_variant": v})
        result = train_decoder(ae, bank, cfg)
        paths[v] = out_dir / f"decoder_{v}.pt"
        save_autoencoder(ae, paths[v], extra={"losses": result["losses"]})
    return paths


def train_rectify_suite(base: InterpDenoiser, autoencoder: Autoencoder, bank: ClipBank, budget: StageConfig,
                        out_dir: str | Path, variants=RECTIFY_VARIANTS) -> dict:
    """Fine-tune one copy of the base denoiser per freeze variant; variant I is the base model as is."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents = encode_bank(autoencoder, bank)
    paths = {}
    for v in variants:
        model = copy.deepcopy(base)
        if v != "I":
            cfg = StageConfig.from_mapping({**budget.to_dict(), "stage": "rectify", "freeze_policy": v})
            train_rectify(model, autoencoder, bank, cfg, latents=latents)
        paths[v] = out_dir / f"rectify_{v}.pt"
        save_denoiser(model, paths[v], extra={"policy": v})
    return paths
