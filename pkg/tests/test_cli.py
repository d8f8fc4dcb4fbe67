import json

import numpy as np
import pytest
import torch
from PIL import Image

from toonterp.autoencoder import EncoderFeaturePyramid, load_autoencoder
from toonterp.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERICAL, EXIT_OK, main, read_image, write_image

TINY_MODEL = ["--set", "model.base_width=16", "--set", "model.context_dim=16", "--set", "model.fps_embed_dim=16",
              "--set", "model.icp_width=8", "--set", "model.heads=2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ae_dir, rect, dec, sk = (root / n for n in ("data", "ae", "rect", "dec", "sketch"))
    assert run("gen-data", "--out", data, "--seed", 0, "--set", "n_clips=10", "--set", "eval_size=2") == EXIT_OK
    assert run("train", "autoencoder", "--data", data, "--out", ae_dir, "--set", "steps=3", "--set", "batch_size=1",
               "--set", "ae.width=8") == EXIT_OK
    assert run("train", "rectify", "--data", data, "--autoencoder", ae_dir / "autoencoder.pt", "--out", rect,
               "--set", "steps=2", "--set", "batch_size=2", *TINY_MODEL) == EXIT_OK
    assert run("train", "decoder", "--data", data, "--autoencoder", ae_dir / "autoencoder.pt", "--out", dec,
               "--set", "steps=2", "--set", "batch_size=1") == EXIT_OK
    assert run("train", "sketch", "--data", data, "--autoencoder", dec / "autoencoder.pt",
               "--denoiser", rect / "denoiser.pt", "--out", sk, "--set", "steps=2", "--set", "batch_size=1") == EXIT_OK
    clip = sorted((data / "clips").iterdir())[0]
    sketch = root / "sketch.png"
    Image.fromarray(np.full((32, 32), 255, np.uint8)).save(sketch)
    return {"root": root, "data": data, "ae": dec / "autoencoder.pt", "denoiser": rect / "denoiser.pt",
            "sketch_encoder": sk / "sketch_encoder.pt", "first": clip / "frame_000.png",
            "last": clip / "frame_007.png", "sketch": sketch}


def sample_args(ws, out, *extra):
    return ["sample", "--first", ws["first"], "--last", ws["last"], "--autoencoder", ws["ae"],
            "--denoiser", ws["denoiser"], "--out", out, "--steps", 3, *extra]


def frames_of(directory):
    return [np.asarray(Image.open(p)) for p in sorted(directory.glob("frame_*.png"))]


def test_run_artifacts(workspace):
    data = workspace["data"]
    assert (data / "manifest.jsonl").is_file() and (data / "filter_reports.jsonl").is_file()
    record = json.loads((data / "run.json").read_text())
    assert record["seed"] == 0 and "manifest.jsonl" in record["outputs"]
    assert "n_clips = 10" in (data / "config.txt").read_text()
    rect = workspace["denoiser"].parent
    record = json.loads((rect / "run.json").read_text())
    assert any(k.endswith("autoencoder.pt") for k in record["inputs"]) and "denoiser.pt" in record["outputs"]
    assert len((rect / "train_log.jsonl").read_text().splitlines()) == 2


def test_sample_two_frames_are_reconstructions(workspace, tmp_path):
    out = tmp_path / "s2"
    assert run(*sample_args(workspace, out, "--frames", 2)) == EXIT_OK
    ae = load_autoencoder(workspace["ae"])
    # encode each frame on its own: batched convs differ from single-frame ones in the last float bits
    with torch.no_grad():
        (z1, pyr1), (zL, pyrL) = ae.encode(read_image(workspace["first"])), ae.encode(read_image(workspace["last"]))
        lift = lambda p: EncoderFeaturePyramid({i: f[None] for i, f in p.features.items()})
        recon = ae.decode(torch.stack([z1, zL])[None], lift(pyr1), lift(pyrL))[0]
    for k in range(2):
        write_image(recon[k], tmp_path / f"ref_{k}.png")
    got = frames_of(out)
    assert len(got) == 2
    for k in range(2):
        assert np.array_equal(got[k], np.asarray(Image.open(tmp_path / f"ref_{k}.png")))


def test_sample_same_seed_identical(workspace, tmp_path):
    args = ("--frames", 8, "--sketch", f"4={workspace['sketch']}", "--sketch-encoder", workspace["sketch_encoder"])
    assert run(*sample_args(workspace, tmp_path / "a", *args), "--seed", 5) == EXIT_OK
    assert run(*sample_args(workspace, tmp_path / "b", *args), "--seed", 5) == EXIT_OK
    a, b = frames_of(tmp_path / "a"), frames_of(tmp_path / "b")
    assert len(a) == 8 and all(np.array_equal(x, y) for x, y in zip(a, b))
    record = json.loads((tmp_path / "a" / "run.json").read_text())
    assert record["config"]["sketch_frames"] == [4]


@pytest.mark.parametrize("extra", [
    ("--frames", 8, "--sketch", "9=x.png"),
    ("--frames", 8, "--sketch", "0=x.png"),
    ("--frames", 8, "--sketch", "bad"),
    ("--frames", 1),
    ("--frames", 32),
])
def test_sample_config_errors(workspace, tmp_path, extra):
    assert run(*sample_args(workspace, tmp_path / "e", *extra)) == EXIT_CONFIG


def test_sketch_needs_encoder(workspace, tmp_path):
    args = sample_args(workspace, tmp_path / "e", "--frames", 8, "--sketch", f"4={workspace['sketch']}")
    assert run(*args) == EXIT_CONFIG


def test_missing_inputs(workspace, tmp_path):
    assert run("sample", "--out", tmp_path / "m", "--autoencoder", workspace["ae"]) == EXIT_CONFIG
    assert run(*sample_args(workspace, tmp_path / "m2"), "--set", "nonsense") == EXIT_CONFIG
    assert run("train", "rectify", "--data", tmp_path / "nodata", "--out", tmp_path / "t") == EXIT_CONFIG
    assert run("train", "rectify", "--data", workspace["data"], "--out", tmp_path / "t",
               "--set", "freeze_policy=I", "--autoencoder", workspace["ae"], *TINY_MODEL) == EXIT_CONFIG


def test_numerical_failure_exit_code(workspace, tmp_path):
    code = run("train", "rectify", "--data", workspace["data"], "--autoencoder", workspace["ae"],
               "--out", tmp_path / "nan", "--set", "steps=4", "--set", "batch_size=2",
               "--set", "learning_rate=1e30", "--set", "weight_decay=0", *TINY_MODEL)
    assert code == EXIT_NUMERICAL


def test_eval_writes_metrics(workspace, tmp_path):
    assert run("eval", "--data", workspace["data"], "--autoencoder", workspace["ae"], "--out", tmp_path) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert len(metrics["clip_psnr"]) == 2 and len(metrics["curve"]) == 8


def test_ablate_missing_checkpoints(workspace, tmp_path):
    (tmp_path / "ck").mkdir()
    code = run("ablate", "--suite", "decoder_variants", "--data", workspace["data"], "--autoencoder",
               workspace["ae"], "--checkpoints", tmp_path / "ck", "--out", tmp_path / "ab")
    assert code == EXIT_CONFIG


def test_ablate_ordering_failure_exit_code(workspace, tmp_path):
    # two training steps cannot open a 0.2 dB gap, so the ordering check fails
    code = run("ablate", "--suite", "decoder_variants", "--data", workspace["data"], "--autoencoder",
               workspace["ae"], "--out", tmp_path, "--set", "steps=1", "--set", "batch_size=1")
    assert code == EXIT_FAIL
    report = json.loads((tmp_path / "decoder_variants.json").read_text())
    assert report["passed"] is False
