import numpy as np
import pytest
import torch

from toonterp.autoencoder import Autoencoder, AutoencoderConfig
from toonterp.data import ClipBank, make_clips
from toonterp.denoiser import DenoiserConfig, InterpDenoiser


def tiny_denoiser_config(frames: int = 8) -> DenoiserConfig:
    return DenoiserConfig(frame_count=frames, latent_channels=4, base_width=16, num_levels=2, context_tokens=8,
                          context_dim=16, fps_embed_dim=16, icp_width=8, heads=2)


@pytest.fixture
def small_cfg():
    return tiny_denoiser_config()


@pytest.fixture
def small_model(small_cfg):
    torch.manual_seed(0)
    return InterpDenoiser(small_cfg)


@pytest.fixture
def small_ae():
    torch.manual_seed(0)
    return Autoencoder(AutoencoderConfig(width=8))


@pytest.fixture(scope="session")
def small_bank():
    return ClipBank.from_clips(make_clips(12, seed=3, L=8, H=32, W=32))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the recorder."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
