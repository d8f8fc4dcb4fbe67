import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toonterp.config import DEFAULT_LR, StageConfig, coerce, dump_kv, load_kv, parse_kv
from toonterp.errors import ConfigError


def test_default_learning_rates():
    assert StageConfig(stage="rectify").learning_rate == 1e-5
    assert StageConfig(stage="decoder").learning_rate == 4.5e-6
    assert StageConfig(stage="sketch").learning_rate == 5e-5
    assert StageConfig(stage="rectify", learning_rate=1e-3).learning_rate == 1e-3
    assert set(DEFAULT_LR) == {"autoencoder", "rectify", "decoder", "sketch"}


@pytest.mark.parametrize("kw", [{"stage": "pretrain"}, {"steps": -1}, {"batch_size": 0}, {"audit_every": 0},
                                {"lr_schedule": "linear"}])
def test_invalid_stage_config(kw):
    with pytest.raises(ConfigError):
        StageConfig(**kw)


def test_parse_kv_comments_and_errors():
    assert parse_kv("# header\nsteps = 10  # inline\n\nfreeze_policy=V\n") == {"steps": "10", "freeze_policy": "V"}
    with pytest.raises(ConfigError):
        parse_kv("steps 10")
    with pytest.raises(ConfigError):
        parse_kv("= 3")


def test_coerce_types():
    got = StageConfig.from_mapping({"steps": "7", "learning_rate": "3e-4", "fps_choices": "6, 8",
                                    "deterministic": "false"})
    assert (got.steps, got.learning_rate, got.fps_choices, got.deterministic) == (7, 3e-4, (6, 8), False)
    assert StageConfig.from_mapping({"learning_rate": "none", "stage": "sketch"}).learning_rate == 5e-5
    with pytest.raises(ConfigError):
        coerce(StageConfig, {"stepz": "1"})
    with pytest.raises(ConfigError):
        coerce(StageConfig, {"steps": "ten"})
    with pytest.raises(ConfigError):
        coerce(StageConfig, {"deterministic": "maybe"})


def test_load_kv_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_kv(tmp_path / "absent.txt")


@given(st.integers(0, 10 ** 6), st.floats(1e-8, 1.0), st.sampled_from(["I", "II", "III", "IV", "V"]),
       st.lists(st.integers(1, 60), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_dump_load_roundtrip(steps, lr, policy, fps):
    cfg = StageConfig(steps=steps, learning_rate=lr, freeze_policy=policy, fps_choices=tuple(fps))
    back = StageConfig.from_mapping(parse_kv(dump_kv(cfg.to_dict())))
    assert back == cfg


def test_lr_factor():
    assert StageConfig(steps=10).lr_factor(7) == 1.0
    cos = StageConfig(steps=4, lr_schedule="cosine")
    # half-cosine values at quarter points: 1, (1+1/sqrt2)/2, 1/2, (1-1/sqrt2)/2, 0
    expected = [1.0, 0.8535533905932737, 0.5, 0.14644660940672627, 0.0]
    assert [cos.lr_factor(s) for s in range(5)] == pytest.approx(expected, abs=1e-12)
    assert cos.lr_factor(9) == pytest.approx(0.0, abs=1e-12)
