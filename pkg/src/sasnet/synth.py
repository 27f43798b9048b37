"""Synthetic moving-sprite sequences and training pairs.

Textured rectangles/ellipses move at constant velocity over a cluttered
static background, optionally with distractor sprites and a sweeping
occluder bar. Everything is drawn from ``numpy.random.default_rng`` seeded
per sequence/pair, so identical seeds give byte-identical frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crops import BBox, Frame, write_groundtruth, write_ppm


@dataclass
class SynthConfig:
    height: int = 180
    width: int = 240
    target_long: tuple[float, float] = (28.0, 48.0)  # long side range, px
    aspect: tuple[float, float] = (0.5, 2.0)  # w / h
    max_speed: float = 2.5  # px per frame
    clutter: int = 12  # background blobs
    distractors: int = 1
    occluder: bool = False
    noise: float = 0.02  # per-frame pixel noise std


@dataclass
class Sprite:
    shape: str
    w: float
    h: float
    color: np.ndarray
    accent: np.ndarray
    stripes: tuple[float, float]
    patch: np.ndarray = field(repr=False)  # 8 x 8 x 3 brightness jitter

    @classmethod
    def random(cls, rng, w, h) -> "Sprite":
        color = rng.uniform(0.05, 0.95, size=3)
        accent = np.clip(1.0 - color + rng.normal(0, 0.1, size=3), 0, 1)
        return cls(
            shape="ellipse" if rng.random() < 0.5 else "rect",
            w=w,
            h=h,
            color=color,
            accent=accent,
            stripes=(float(rng.integers(-3, 4)), float(rng.integers(1, 4))),
            patch=rng.normal(0, 0.08, size=(8, 8, 3)),
        )

    def draw(self, canvas, cx, cy):
        """Paint onto an H x W x 3 float canvas; pixels whose centres fall inside."""
        H, W, _ = canvas.shape
        x0, y0 = cx - self.w / 2, cy - self.h / 2
        c0, c1 = max(0, int(np.floor(x0))), min(W, int(np.ceil(x0 + self.w)) + 1)
        r0, r1 = max(0, int(np.floor(y0))), min(H, int(np.ceil(y0 + self.h)) + 1)
        if c0 >= c1 or r0 >= r1:
            return
        u = (np.arange(c0, c1) + 0.5 - x0) / self.w
        v = (np.arange(r0, r1) + 0.5 - y0) / self.h
        uu, vv = np.meshgrid(u, v)
        if self.shape == "ellipse":
            mask = (uu - 0.5) ** 2 + (vv - 0.5) ** 2 < 0.25
        else:
            mask = (uu >= 0) & (uu < 1) & (vv >= 0) & (vv < 1)
        if not mask.any():
            return
        ku, kv = self.stripes
        band = (np.sin(2 * np.pi * (ku * uu + kv * vv)) > 0)[..., None]
        tex = np.where(band, self.accent, self.color)
        iu = np.clip((uu * 8).astype(int), 0, 7)
        iv = np.clip((vv * 8).astype(int), 0, 7)
        tex = np.clip(tex + self.patch[iv, iu], 0, 1)
        region = canvas[r0:r1, c0:c1]
        region[mask] = tex[mask]


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W]
    base = rng.uniform(0.2, 0.8, size=3)
    slope = rng.normal(0, 0.15, size=(2, 3))
    canvas = base + (yy[..., None] / H - 0.5) * slope[0] + (xx[..., None] / W - 0.5) * slope[1]
    canvas = np.clip(canvas, 0, 1)
    for _ in range(cfg.clutter):
        bw, bh = rng.uniform(8, 60, size=2)
        blob = Sprite.random(rng, bw, bh)
        blob.patch *= 0.5
        blob.draw(canvas, rng.uniform(0, W), rng.uniform(0, H))
    return canvas


def _sample_size(rng, cfg: SynthConfig) -> tuple[float, float]:
    long = rng.uniform(*cfg.target_long)
    aspect = np.exp(rng.uniform(np.log(cfg.aspect[0]), np.log(cfg.aspect[1])))
    return (long, long / aspect) if aspect >= 1 else (long * aspect, long)


def _track(rng, cfg, w, h, n_frames, speed):
    """Constant-velocity centres that keep the whole box inside the frame."""
    lo = np.array([w / 2 + 1, h / 2 + 1])
    hi = np.array([cfg.width - w / 2 - 1, cfg.height - h / 2 - 1])
    start = rng.uniform(lo, hi)
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    if n_frames > 1:
        # shrink the velocity until the end point stays inside
        for _ in range(60):
            end = start + vel * (n_frames - 1)
            if np.all(end >= lo) and np.all(end <= hi):
                break
            vel *= 0.9
        else:
            vel[:] = 0
    return start[None, :] + vel[None, :] * np.arange(n_frames)[:, None]


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]  # H x W x 3 uint8
    boxes: list[BBox]

    def frame(self, i: int) -> Frame:
        return Frame.from_uint8(self.frames[i])

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.frames, 1):
            write_ppm(out / f"{i:06d}.ppm", img)
        write_groundtruth(out / "groundtruth.txt", self.boxes)


def render_sequence(seed, n_frames: int, cfg: SynthConfig | None = None, speed=None) -> SyntheticSequence:
    """One sequence; ``speed`` fixes the target speed (0 gives a static target)."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    background = _background(rng, cfg)
    w, h = _sample_size(rng, cfg)
    target = Sprite.random(rng, w, h)
    speed = rng.uniform(0.5, cfg.max_speed) if speed is None else speed
    centres = _track(rng, cfg, w, h, n_frames, speed)

    others = []
    for _ in range(cfg.distractors):
        dw, dh = _sample_size(rng, cfg)
        others.append((Sprite.random(rng, dw, dh), _track(rng, cfg, dw, dh, n_frames, rng.uniform(0, cfg.max_speed))))
    occ = None
    if cfg.occluder:
        occ_w = rng.uniform(0.2, 0.5) * w
        occ_x = np.linspace(-occ_w, cfg.width + occ_w, n_frames)
        occ = (occ_w, occ_x, rng.uniform(0.1, 0.9, size=3))

    frames, boxes = [], []
    for t in range(n_frames):
        canvas = background.copy()
        for sprite, path in others:
            sprite.draw(canvas, *path[t])
        target.draw(canvas, *centres[t])
        if occ is not None:
            occ_w, occ_x, color = occ
            lo, hi = int(max(0, occ_x[t])), int(min(cfg.width, occ_x[t] + occ_w))
            if lo < hi:
                canvas[:, lo:hi] = color
        if cfg.noise:
            canvas = canvas + rng.normal(0, cfg.noise, size=canvas.shape)
        frames.append(np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8))
        boxes.append(BBox(float(centres[t][0]), float(centres[t][1]), float(w), float(h)))
    return SyntheticSequence(frames, boxes)


def write_sequences(out_dir, seed, n_sequences, n_frames, cfg=None, speed=None) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_sequences):
        seq = render_sequence([seed, i], n_frames, cfg, speed)
        path = out_dir / f"seq_{i + 1:04d}"
        seq.write(path)
        paths.append(path)
    return paths


def write_pairs(out_dir, seed, n_pairs, cfg=None, max_gap=4) -> list[Path]:
    """Training pairs as two-frame sequence directories (frames a and b)."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_pairs):
        seq = render_sequence([seed, i], max_gap + 1, cfg)
        gap = int(np.random.default_rng([seed, i, 1]).integers(1, max_gap + 1))
        pair = SyntheticSequence([seq.frames[0], seq.frames[gap]], [seq.boxes[0], seq.boxes[gap]])
        path = out_dir / f"pair_{i + 1:06d}"
        pair.write(path)
        paths.append(path)
    return paths
