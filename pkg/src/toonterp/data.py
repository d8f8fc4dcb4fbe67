"""Procedural cartoon clips and the clip-filtering pipeline.

Clips are flat-coloured shapes with dark outlines moving over a flat
background. Frames are rendered as ``uint8`` first, so writing them to PNG
and reading them back is lossless. A ``"live"`` style renders the same motions
with shading, texture and noise instead of outlines. It serves as the
pre-training domain that rectification later adapts away from.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ParameterError

MOTION_KINDS = ("linear", "arc", "occlusion", "morph")
CAPTION_LEN = 10

COLORS = {
    "red": (220, 40, 40), "green": (60, 170, 70), "blue": (50, 90, 210), "yellow": (240, 210, 50),
    "orange": (240, 140, 30), "purple": (140, 70, 180), "pink": (240, 130, 180), "cyan": (60, 200, 210),
    "white": (245, 245, 245), "gray": (150, 150, 150), "brown": (140, 90, 50), "teal": (30, 130, 130),
}
BACKGROUNDS = ("white", "yellow", "cyan", "pink", "gray", "green", "blue", "orange")
SHAPES = ("circle", "square", "triangle", "diamond")
OUTLINE = (20, 20, 25)

VOCAB = (
    ["<null>", "<unk>", "a", "the", "and", "on", "over", "background", "cartoon", "photo", "moves", "left",
     "right", "up", "down", "arcs", "clockwise", "counterclockwise", "passes", "behind", "stretches",
     "squashes", "grows", "shrinks", "slowly", "quickly", "small", "big"]
    + list(COLORS) + list(SHAPES)
)
VOCAB += [f"<extra{i}>" for i in range(64 - len(VOCAB))]
TOKEN = {w: i for i, w in enumerate(VOCAB)}


def encode_caption(words: Iterable[str]) -> list[int]:
    ids = [TOKEN.get(w, TOKEN["<unk>"]) for w in words][:CAPTION_LEN]
    return ids + [0] * (CAPTION_LEN - len(ids))


def decode_caption(ids: Iterable[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i)


@dataclass(frozen=True)
class ClipSpec:
    L: int = 8
    H: int = 32
    W: int = 32
    motion_kind: str = "linear"
    fps: int = 8
    style: str = "toon"

    def __post_init__(self):
        if self.L < 1 or self.H < 8 or self.W < 8:
            raise ParameterError(f"invalid clip size {self.L}x{self.H}x{self.W}")
        if self.motion_kind not in MOTION_KINDS:
            raise ParameterError(f"unknown motion kind {self.motion_kind!r}")
        if self.style not in ("toon", "live"):
            raise ParameterError(f"unknown style {self.style!r}")
        if self.fps <= 0:
            raise ParameterError("fps must be positive")


@dataclass
class ToonClip:
    frames: np.ndarray  # (L, 3, H, W) float32 in [-1, 1]
    caption: list
    fps: int
    motion_kind: str
    clip_id: str = ""
    style: str = "toon"
    masks: np.ndarray | None = None  # (L, n_objects, H, W) full object silhouettes, back to front

    @property
    def L(self) -> int:
        return self.frames.shape[0]


@dataclass
class _Shape:
    kind: str
    color: str
    size: float


def _shape_mask(kind: str, cx: float, cy: float, size: float, sx: float, sy: float, yy, xx) -> np.ndarray:
    dx, dy = (xx - cx) / (size * sx), (yy - cy) / (size * sy)
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= 1.0
    if kind == "square":
        return (np.abs(dx) <= 0.85) & (np.abs(dy) <= 0.85)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if kind == "triangle":
        return (dy <= 0.8) & (dy >= -1.0 + 1.8 * np.abs(dx) * 1.0) & (np.abs(dx) <= 1.0)
    raise ParameterError(f"unknown shape {kind!r}")


def _outline(mask: np.ndarray) -> np.ndarray:
    interior = mask.copy()
    interior[1:] &= mask[:-1]
    interior[:-1] &= mask[1:]
    interior[:, 1:] &= mask[:, :-1]
    interior[:, :-1] &= mask[:, 1:]
    return mask & ~interior


def _direction_words(dx: float, dy: float) -> list[str]:
    if abs(dx) >= abs(dy):
        return ["right" if dx > 0 else "left"]
    return ["down" if dy > 0 else "up"]


def _trajectories(spec: ClipSpec, rng: np.random.Generator, shapes: list[_Shape]):
    """Per-object, per-frame ``(cx, cy, sx, sy)`` and the caption verb phrase."""
    L, H, W = spec.L, spec.H, spec.W
    span = 8.0 / spec.fps  # slower per-frame motion at higher fps
    tau = np.arange(L) / max(L - 1, 1) * span
    lo, hi = 0.25, 0.75
    if spec.motion_kind == "linear":
        p0 = rng.uniform(lo, hi, 2) * (W, H)
        angle = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.25, 0.45) * W
        d = dist * np.array([np.cos(angle), np.sin(angle)])
        start = p0 - d * span / 2
        traj = [(start[0] + d[0] * t, start[1] + d[1] * t, 1.0, 1.0) for t in tau]
        return [traj], ["moves", *_direction_words(*d)]
    if spec.motion_kind == "arc":
        c = rng.uniform(0.4, 0.6, 2) * (W, H)
        r = rng.uniform(0.18, 0.28) * W
        th0 = rng.uniform(0, 2 * np.pi)
        sweep = rng.choice([-1, 1]) * rng.uniform(0.6, 1.2) * np.pi
        traj = [(c[0] + r * np.cos(th0 + sweep * t), c[1] + r * np.sin(th0 + sweep * t), 1.0, 1.0) for t in tau]
        return [traj], ["arcs", "clockwise" if sweep > 0 else "counterclockwise"]
    if spec.motion_kind == "occlusion":
        front, back = shapes
        a = rng.uniform(0.4, 0.6, 2) * (W, H)
        angle = rng.uniform(0, 2 * np.pi)
        # the back object enters from one side of the front one and leaves on the other
        step = (front.size + back.size + 2.0) * rng.uniform(1.6, 2.2) * span / max(L - 1, 1)
        d = step * np.array([np.cos(angle), np.sin(angle)])
        k_mid = (L - 1) // 2
        back_traj = [(a[0] + d[0] * (k - k_mid), a[1] + d[1] * (k - k_mid), 1.0, 1.0) for k in range(L)]
        front_traj = [(a[0], a[1], 1.0, 1.0)] * L
        return [back_traj, front_traj], ["passes", "behind"]
    # morph: squash-and-stretch while drifting
    c = rng.uniform(0.4, 0.6, 2) * (W, H)
    d = rng.uniform(-0.1, 0.1, 2) * W
    amp = rng.uniform(0.35, 0.55)
    phase = rng.uniform(0, 2 * np.pi)
    traj = []
    for t in tau:
        s = 1.0 + amp * np.sin(phase + 2.0 * t)
        traj.append((c[0] + d[0] * t, c[1] + d[1] * t, s, 1.0 / s))
    return [traj], ["stretches" if amp * np.cos(phase) > 0 else "squashes"]


def generate_clip(spec: ClipSpec, rng: np.random.Generator, clip_id: str = "") -> ToonClip:
    """Render one clip; a given ``rng`` state always yields the same clip."""
    L, H, W = spec.L, spec.H, spec.W
    bg_name = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    fg_names = [c for c in COLORS if c != bg_name]
    if spec.motion_kind == "occlusion":
        front = _Shape(SHAPES[rng.integers(2)], fg_names[rng.integers(len(fg_names))], rng.uniform(0.26, 0.32) * W)
        back_color = [c for c in fg_names if c != front.color]
        back = _Shape(SHAPES[rng.integers(len(SHAPES))], back_color[rng.integers(len(back_color))],
                      front.size * rng.uniform(0.35, 0.5))
        shapes = [back, front]
    else:
        shapes = [_Shape(SHAPES[rng.integers(len(SHAPES))], fg_names[rng.integers(len(fg_names))],
                         rng.uniform(0.16, 0.26) * W)]
    trajs, verb = _trajectories(spec, rng, shapes)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    live = spec.style == "live"
    if live:
        ramp = rng.uniform(-40, 40, 2)
        bg_field = np.asarray(COLORS[bg_name], np.float64)[:, None, None] + (ramp[0] * (xx / W - 0.5) + ramp[1] * (yy / H - 0.5))
        texture = rng.normal(0, 1, (3, H // 4 + 1, W // 4 + 1))
        texture = np.kron(texture, np.ones((1, 4, 4)))[:, :H, :W] * 10
    frames = np.empty((L, 3, H, W), np.uint8)
    masks = np.zeros((L, len(shapes), H, W), bool)
    for k in range(L):
        img = (bg_field + texture).copy() if live else np.broadcast_to(
            np.asarray(COLORS[bg_name], np.float64)[:, None, None], (3, H, W)).copy()
        for j, (shape, traj) in enumerate(zip(shapes, trajs)):
            cx, cy, sx, sy = traj[k]
            m = _shape_mask(shape.kind, cx, cy, shape.size, sx, sy, yy, xx)
            masks[k, j] = m
            fill = np.asarray(COLORS[shape.color], np.float64)
            if live:
                shade = 1.0 + 0.35 * ((cx - xx) + (cy - yy)) / (shape.size + 1e-6)
                img[:, m] = (fill[:, None] * np.clip(shade, 0.5, 1.4)[m][None])
            else:
                img[:, m] = fill[:, None]
                img[:, _outline(m)] = np.asarray(OUTLINE, np.float64)[:, None]
        if live:
            img = img + rng.normal(0, 4, img.shape)
        frames[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    words = ["a", shapes[-1].color, shapes[-1].kind] if spec.motion_kind != "occlusion" else \
        ["a", shapes[0].color, shapes[0].kind]
    words += verb
    words += ["the", shapes[1].kind] if spec.motion_kind == "occlusion" else ["on", bg_name]
    words += ["cartoon" if not live else "photo"]
    return ToonClip(frames=frames.astype(np.float32) / 127.5 - 1.0, caption=encode_caption(words),
                    fps=spec.fps, motion_kind=spec.motion_kind, clip_id=clip_id, style=spec.style, masks=masks)


def make_clips(n: int, seed: int, L: int = 8, H: int = 32, W: int = 32, fps_choices=(6, 8, 12),
               kinds=MOTION_KINDS, style: str = "toon") -> list[ToonClip]:
    """Generate ``n`` clips, each from its own seed derived from ``(seed, index)``."""
    clips = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        kind = kinds[rng.integers(len(kinds))]
        fps = int(fps_choices[rng.integers(len(fps_choices))])
        clips.append(generate_clip(ClipSpec(L, H, W, kind, fps, style), rng, clip_id=f"{style}-{seed}-{i:05d}"))
    return clips


# ----------------------------------------------------------------------------- filtering


def _gray(frame: np.ndarray) -> np.ndarray:
    return (0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]) * 127.5


def block_flow(a: np.ndarray, b: np.ndarray, block: int = 8, search: int = 4) -> np.ndarray:
    """Block-matching motion vectors from grayscale frame ``a`` to ``b``.

    Returns ``(rows, cols, 2)`` displacements (dy, dx). Ties go to the smaller
    displacement, so flat regions report zero motion.
    """
    H, W = a.shape
    rows, cols = H // block, W // block
    pad = np.pad(b, search, mode="constant", constant_values=np.nan)
    best = np.full((rows, cols), np.inf)
    best_mag = np.full((rows, cols), np.inf)
    flow = np.zeros((rows, cols, 2))
    a_blocks = a[:rows * block, :cols * block].reshape(rows, block, cols, block)
    offsets = sorted(((dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)),
                     key=lambda d: d[0] ** 2 + d[1] ** 2)
    for dy, dx in offsets:
        shifted = pad[search + dy:search + dy + rows * block, search + dx:search + dx + cols * block]
        sad = np.abs(a_blocks - shifted.reshape(rows, block, cols, block)).sum(axis=(1, 3))
        sad = np.where(np.isnan(sad), np.inf, sad)
        mag = np.hypot(dy, dx)
        better = (sad < best - 1e-9)
        best = np.where(better, sad, best)
        best_mag = np.where(better, mag, best_mag)
        flow[better] = (dy, dx)
    return flow


def pixel_flow_magnitude(a: np.ndarray, b: np.ndarray, block: int = 8, search: int = 4) -> np.ndarray:
    """Per-pixel motion magnitude from block matching.

    Each pixel takes its block's vector only when that vector explains the pixel
    strictly better than zero motion; otherwise it counts as static. This keeps
    background pixels that share a block with a moving object from being counted.
    """
    flow = block_flow(a, b, block, search)
    rows, cols = flow.shape[:2]
    d = np.kron(flow, np.ones((block, block, 1))).astype(int)  # (rows*block, cols*block, 2)
    yy, xx = np.mgrid[0:rows * block, 0:cols * block]
    pad = np.pad(b, search, mode="edge")
    warped = pad[yy + search + d[..., 0], xx + search + d[..., 1]]
    a_c, b_c = a[:rows * block, :cols * block], b[:rows * block, :cols * block]
    moving = np.abs(a_c - warped) < np.abs(a_c - b_c)
    return np.where(moving, np.hypot(d[..., 0], d[..., 1]), 0.0)


def flow_score(clip: ToonClip, block: int = 8, search: int = 4) -> float:
    """Mean per-pixel flow magnitude over consecutive frame pairs."""
    if clip.L < 2:
        raise ParameterError("flow needs at least two frames")
    mags = [pixel_flow_magnitude(_gray(clip.frames[k]), _gray(clip.frames[k + 1]), block, search).mean()
            for k in range(clip.L - 1)]
    return float(np.mean(mags))


@dataclass
class FilterReport:
    clip_id: str
    scores: dict = field(default_factory=dict)
    kept: bool = True
    reasons: list = field(default_factory=list)


def flow_magnitude_filter(clip: ToonClip, threshold: float) -> FilterReport:
    score = flow_score(clip)
    kept = score >= threshold
    return FilterReport(clip.clip_id, {"flow": score}, kept, [] if kept else [f"flow {score:.3f} < {threshold}"])


class StubScorer:
    """Stand-in for a model-based scorer (OCR text amount, aesthetics, caption alignment).

    Returns ``values[clip_id]`` when present, else ``default``. Scores follow the
    convention that higher is better (e.g. text-free fraction rather than text area).
    """

    def __init__(self, name: str, default: float = 1.0, values: Mapping[str, float] | None = None):
        self.name = name
        self.default = default
        self.values = dict(values or {})

    def __call__(self, clip: ToonClip) -> float:
        return float(self.values.get(clip.clip_id, self.default))


def default_scorers() -> dict[str, Callable[[ToonClip], float]]:
    return {"flow": flow_score, "text_free": StubScorer("text_free"), "aesthetic": StubScorer("aesthetic", 5.0),
            "caption_alignment": StubScorer("caption_alignment", 0.3)}


def single_shot(clip: ToonClip) -> list[tuple[int, int]]:
    """Scene splitter for synthetic clips: one shot covering every frame."""
    return [(0, clip.L)]


@dataclass
class Manifest:
    entries: list  # kept clips: {"clip_id", "split", "scores", ...}
    reports: list

    def ids(self, split: str) -> list[str]:
        return [e["clip_id"] for e in self.entries if e["split"] == split]

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> "Manifest":
        entries = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return Manifest(entries, [])


def run_pipeline(clips: Iterable[ToonClip], scorers: Mapping[str, Callable[[ToonClip], float]],
                 thresholds: Mapping[str, float], seed: int = 0, eval_size: int = 50) -> Manifest:
    """Score every clip, keep those meeting all thresholds, and split kept clips train/eval."""
    if not scorers:
        raise ConfigError("at least one scorer is required")
    missing = set(thresholds) - set(scorers)
    if missing:
        raise ConfigError(f"thresholds given for unknown scorers: {sorted(missing)}")
    unthresholded = set(scorers) - set(thresholds)
    if unthresholded:
        raise ConfigError(f"scorers without thresholds: {sorted(unthresholded)}")
    reports, kept = [], []
    for clip in clips:
        scores = {name: float(scorers[name](clip)) for name in sorted(scorers)}
        reasons = [f"{name} {scores[name]:.4g} < {thresholds[name]:.4g}" for name in sorted(scorers)
                   if not scores[name] >= thresholds[name]]
        reports.append(FilterReport(clip.clip_id, scores, not reasons, reasons))
        if not reasons:
            kept.append((clip, scores))
    order = np.random.default_rng(seed).permutation(len(kept))
    n_eval = min(eval_size, len(kept) // 2)
    entries = []
    for rank, idx in enumerate(order):
        clip, scores = kept[idx]
        entries.append({"clip_id": clip.clip_id, "split": "eval" if rank < n_eval else "train", "scores": scores,
                        "fps": clip.fps, "motion_kind": clip.motion_kind, "style": clip.style,
                        "caption": decode_caption(clip.caption)})
    entries.sort(key=lambda e: e["clip_id"])
    return Manifest(entries, reports)


# ----------------------------------------------------------------------------- storage


def save_clip(clip: ToonClip, directory: str | Path) -> Path:
    d = Path(directory) / clip.clip_id
    d.mkdir(parents=True, exist_ok=True)
    u8 = np.rint((clip.frames + 1.0) * 127.5).astype(np.uint8)
    for k in range(clip.L):
        Image.fromarray(u8[k].transpose(1, 2, 0)).save(d / f"frame_{k:03d}.png")
    meta = {"clip_id": clip.clip_id, "caption": clip.caption, "fps": clip.fps, "motion_kind": clip.motion_kind,
            "style": clip.style, "L": clip.L}
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return d


def load_clip(directory: str | Path) -> ToonClip:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    frames = np.stack([np.asarray(Image.open(d / f"frame_{k:03d}.png").convert("RGB")).transpose(2, 0, 1)
                       for k in range(meta["L"])])
    frames = np.ascontiguousarray(frames, dtype=np.float32) / 127.5 - 1.0
    return ToonClip(frames=frames, caption=meta["caption"], fps=meta["fps"],
                    motion_kind=meta["motion_kind"], clip_id=meta["clip_id"], style=meta.get("style", "toon"))


def save_dataset(clips: list[ToonClip], directory: str | Path, manifest: Manifest | None = None) -> Path:
    root = Path(directory)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_clip(clip, root / "clips")
    if manifest is not None:
        manifest.write(root / "manifest.jsonl")
    return root


def load_dataset(directory: str | Path, split: str | None = None) -> list[ToonClip]:
    root = Path(directory)
    manifest_path = root / "manifest.jsonl"
    if manifest_path.exists():
        entries = Manifest.read(manifest_path).entries
        ids = [e["clip_id"] for e in entries if split is None or e["split"] == split]
    else:
        ids = sorted(p.name for p in (root / "clips").iterdir())
    return [load_clip(root / "clips" / i) for i in ids]


@dataclass
class ClipBank:
    """Stacked tensors for a list of equally-sized clips."""

    frames: torch.Tensor  # (N, L, 3, H, W)
    captions: torch.Tensor  # (N, CAPTION_LEN)
    fps: torch.Tensor  # (N,)
    ids: list

    @classmethod
    def from_clips(cls, clips: list[ToonClip]) -> "ClipBank":
        if not clips:
            raise ParameterError("no clips")
        return cls(frames=torch.from_numpy(np.stack([c.frames for c in clips])),
                   captions=torch.tensor([c.caption for c in clips], dtype=torch.long),
                   fps=torch.tensor([c.fps for c in clips], dtype=torch.long),
                   ids=[c.clip_id for c in clips])

    def __len__(self) -> int:
        return self.frames.shape[0]

    def sample_batch(self, rng: np.random.Generator, batch_size: int, fps_choices=None) -> np.ndarray:
        """Indices for one batch; with ``fps_choices`` the batch shares one fps drawn uniformly."""
        pool = np.arange(len(self))
        if fps_choices:
            fps = fps_choices[rng.integers(len(fps_choices))]
            matching = pool[self.fps.numpy() == fps]
            if len(matching):
                pool = matching
        return rng.choice(pool, size=batch_size, replace=len(pool) < batch_size)
