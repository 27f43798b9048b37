"""Online tracking: one-time initialisation, then multi-scale search per frame."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from . import tensor as T
from .crops import BBox, Frame, FrameError, load_frame, make_exemplar, make_instance, make_semantic
from .net import SasNetParams

MIN_SIDE = 4.0


@dataclass(frozen=True)
class TrackConfig:
    scale_factors: tuple[float, ...] = (1 / 1.04, 1.0, 1.04)
    scale_penalty: float = 0.975
    scale_damping: float = 0.6
    upsample_factor: int = 16
    total_stride: int = net.TOTAL_STRIDE
    cosine_window: bool = False
    window_influence: float = 0.3

    def __post_init__(self):
        if not any(f == 1.0 for f in self.scale_factors):
            raise ValueError("scale_factors must contain 1.0")
        if min(self.scale_factors) <= 0:
            raise ValueError("scale factors must be positive")
        if not 0 < self.scale_penalty <= 1:
            raise ValueError("scale_penalty must be in (0, 1]")
        if not 0 <= self.scale_damping <= 1:
            raise ValueError("scale_damping must be in [0, 1]")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")


@dataclass
class TrackerState:
    exemplar_feat: np.ndarray  # frozen phi(Z)
    channel_weights: np.ndarray  # frozen attention output
    box: BBox
    scale_state: float
    config: TrackConfig
    params: SasNetParams = field(repr=False)
    _attended_exemplar: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.exemplar_feat.setflags(write=False)
        self.channel_weights.setflags(write=False)
        if self._attended_exemplar is None:
            self._attended_exemplar = self.exemplar_feat * self.channel_weights[:, None, None]


def init(first_frame: Frame, init_box: BBox, params: SasNetParams, config: TrackConfig | None = None) -> TrackerState:
    config = config or TrackConfig()
    if float(params["response.scale"]) <= 0:
        raise ValueError("response.scale must be positive for peak localisation")
    p = params.leaves()
    z_feat = net.backbone_forward(make_exemplar(first_frame, init_box), p)
    weights = net.attention_forward(net.backbone_forward(make_semantic(first_frame, init_box), p), p)
    return TrackerState(z_feat.data, weights.data, init_box, 1.0, config, params)


def _hann(h, w):
    return np.outer(np.hanning(h + 2)[1:-1], np.hanning(w + 2)[1:-1])[None]


def _vertex(lo, mid, hi):
    """Offset of the parabola through three samples from the middle one."""
    curve = lo - 2 * mid + hi
    return 0.0 if curve >= 0 else 0.5 * (lo - hi) / curve


def locate_peak(response_up: np.ndarray) -> tuple[float, float]:
    """Peak displacement (rows, cols) from the map centre, in map cells.

    The argmax is refined by a three-point parabola per axis; on an even-sized
    upsampled map the centre falls between two cells, and a plain argmax would
    bias every step by half a cell.
    """
    m = response_up[0]
    h, w = m.shape
    i, j = np.unravel_index(np.argmax(m), m.shape)
    di = _vertex(m[i - 1, j], m[i, j], m[i + 1, j]) if 0 < i < h - 1 else 0.0
    dj = _vertex(m[i, j - 1], m[i, j], m[i, j + 1]) if 0 < j < w - 1 else 0.0
    return i + di - (h - 1) / 2, j + dj - (w - 1) / 2


def displacement_to_source(disp_up, side: float, config: TrackConfig) -> tuple[float, float]:
    """Upsampled-map displacement -> source pixels (stride/upsample, then S/255)."""
    k = config.total_stride / config.upsample_factor * side / net.INSTANCE_SIZE
    return disp_up[0] * k, disp_up[1] * k


def scale_responses(state: TrackerState, frame: Frame):
    """Raw responses and search sides for every configured scale factor."""
    p = state.params.leaves()
    w = state.channel_weights
    out = []
    for f in state.config.scale_factors:
        crop, side = make_instance(frame, state.box, f)
        x_feat = net.backbone_forward(crop, p).data
        raw = T.xcorr(state._attended_exemplar, x_feat * w[:, None, None]).data
        out.append((f, raw, side))
    return out


def step(state: TrackerState, frame: Frame) -> tuple[BBox, float]:
    cfg = state.config
    head = {k: T.Tensor(state.params[k]) for k in ("response.scale", "response.bias")}
    responses = scale_responses(state, frame)
    # every scale is standardised with the unit-scale statistics, so ranking follows the raw peak
    unit = next(raw for f, raw, _ in responses if f == 1.0)
    mu, sd = unit.mean(), np.sqrt(unit.var() + T.STANDARDIZE_EPS)
    a, b = float(head["response.scale"].data), float(head["response.bias"].data)
    best = None
    for f, raw, side in responses:
        peak = T.sigmoid_array(a * (raw.max() - mu) / sd + b)
        ranked = peak if f == 1.0 else peak * cfg.scale_penalty
        if best is None or ranked > best[0] or (ranked == best[0] and f == 1.0):
            best = (ranked, f, raw, side, float(peak))
    _, f_best, raw, side, score = best

    resp = T.upsample(raw, cfg.upsample_factor)
    if cfg.cosine_window:
        span = resp.max() - resp.min()
        norm = (resp - resp.min()) / span if span > 0 else np.zeros_like(resp)
        resp = (1 - cfg.window_influence) * norm + cfg.window_influence * _hann(*resp.shape[1:])
    dy, dx = displacement_to_source(locate_peak(resp), side, cfg)

    old = state.box
    ratio = cfg.scale_damping + (1 - cfg.scale_damping) * f_best
    frame_w, frame_h = frame.width, frame.height
    w = float(np.clip(old.w * ratio, MIN_SIDE, frame_w))
    h = float(np.clip(old.h * ratio, MIN_SIDE, frame_h))
    cx = float(np.clip(old.cx + dx, 0.0, frame_w))
    cy = float(np.clip(old.cy + dy, 0.0, frame_h))
    state.box = BBox(cx, cy, w, h)
    state.scale_state *= ratio
    return state.box, score


@dataclass
class TrackResult:
    boxes: list[BBox]
    scores: list[float]
    seconds: list[float]  # wall clock per frame; entry 0 is initialisation

    @property
    def fps(self) -> float:
        """Frames per second over frames 2..N (initialisation excluded)."""
        t = sum(self.seconds[1:])
        return (len(self.seconds) - 1) / t if t > 0 else float("nan")


def track_sequence(frames, init_box: BBox, params: SasNetParams, config: TrackConfig | None = None) -> TrackResult:
    """Track ``init_box`` through ``frames`` (Frame objects or image paths)."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")

    def get(i):
        fr = frames[i]
        if isinstance(fr, Frame):
            return fr
        try:
            return load_frame(fr)
        except FrameError as exc:
            raise FrameError(f"frame {i + 1}: {exc}") from exc

    t0 = time.perf_counter()
    state = init(get(0), init_box, params, config)
    boxes, scores, seconds = [init_box], [1.0], [time.perf_counter() - t0]
    for i in range(1, len(frames)):
        t0 = time.perf_counter()
        box, score = step(state, get(i))
        seconds.append(time.perf_counter() - t0)
        boxes.append(box)
        scores.append(score)
    return TrackResult(boxes, scores, seconds)


def write_results(path, result: TrackResult):
    lines = ["frame,x,y,w,h,score"]
    for i, (box, score) in enumerate(zip(result.boxes, result.scores), 1):
        x, y, w, h = box.to_xywh()
        lines.append(f"{i},{x:.6f},{y:.6f},{w:.6f},{h:.6f},{score:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> list[tuple[BBox, float]]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].strip() != "frame,x,y,w,h,score":
        raise ValueError(f"{path}: missing results header")
    out = []
    for row in rows[1:]:
        if row.strip():
            _, x, y, w, h, s = row.split(",")
            out.append((BBox.from_xywh(float(x), float(y), float(w), float(h)), float(s)))
    return out
