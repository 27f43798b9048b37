"""Frame I/O and the exemplar / semantic / instance crops.

Coordinates are continuous pixels: pixel ``k`` covers ``[k, k+1)`` so its
centre sits at ``k + 0.5``. A box ``x,y,w,h`` in a ground-truth file spans
``[x, x+w) x [y, y+h)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net import EXEMPLAR_SIZE, INSTANCE_SIZE, MIN_INPUT


class FrameError(IOError):
    """A frame file is missing, unreadable or in an unsupported format."""


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(x + w / 2.0, y + h / 2.0, float(w), float(h))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)


@dataclass
class Frame:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    mean_color: np.ndarray

    @classmethod
    def from_array(cls, rgb) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(rgb, rgb.reshape(3, -1).mean(axis=1))

    @classmethod
    def from_uint8(cls, hwc) -> "Frame":
        return cls.from_array(np.transpose(np.asarray(hwc, dtype=np.float64), (2, 0, 1)) / 255.0)

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]


# ---------------------------------------------------------------- image files


def _read_ppm(data: bytes, path) -> np.ndarray:
    tokens, pos = [], 2
    while len(tokens) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\d+)").match(data, pos)
        if not m:
            raise FrameError(f"{path}: malformed PPM header")
        tokens.append(int(m.group(2)))
        pos = m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise FrameError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FrameError(f"{path}: malformed PPM header")
    pos += 1
    need = width * height * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise FrameError(f"{path}: truncated PPM ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB image to an H x W x 3 uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FrameError(f"{path}: {exc.strerror or exc}") from exc
    if data[:2] == b"P6":
        return _read_ppm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise FrameError(f"{path}: PNG support needs Pillow") from None
        import io

        with Image.open(io.BytesIO(data)) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise FrameError(f"{path}: unsupported PNG mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise FrameError(f"{path}: unsupported image format")


def write_ppm(path, hwc: np.ndarray):
    hwc = np.asarray(hwc)
    if hwc.dtype != np.uint8 or hwc.ndim != 3 or hwc.shape[2] != 3:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w, _ = hwc.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(hwc).tobytes())


def load_frame(path) -> Frame:
    return Frame.from_uint8(read_image(path))


# ---------------------------------------------------------------- sequences


def read_groundtruth(path) -> list[BBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            x, y, w, h = (float(v) for v in re.split(r"[,\s]+", line.strip()))
            boxes.append(BBox.from_xywh(x, y, w, h))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad box {line!r} ({exc})") from None
    return boxes


def format_box(box: BBox) -> str:
    return ",".join(f"{v:.6g}" for v in box.to_xywh())


def write_groundtruth(path, boxes):
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def list_frames(seq_dir) -> list[Path]:
    seq_dir = Path(seq_dir)
    frames = [p for p in seq_dir.iterdir() if re.fullmatch(r"\d+\.(ppm|png)", p.name)]
    return sorted(frames, key=lambda p: int(p.stem))


@dataclass
class SequenceDir:
    path: Path
    frames: list[Path]
    groundtruth: list[BBox]

    @classmethod
    def open(cls, path) -> "SequenceDir":
        path = Path(path)
        frames = list_frames(path)
        gt_path = path / "groundtruth.txt"
        gt = read_groundtruth(gt_path) if gt_path.exists() else []
        return cls(path, frames, gt)

    def __len__(self):
        return len(self.frames)

    def frame(self, i: int) -> Frame:
        return load_frame(self.frames[i])


# ---------------------------------------------------------------- resampling


def resample(frame: Frame, x0, y0, step_x, step_y, out_h, out_w) -> np.ndarray:
    """Bilinearly sample an ``out_h`` x ``out_w`` grid from ``frame``.

    Output pixel (v, u) reads the source point
    ``(x0 + (u + 0.5) * step_x, y0 + (v + 0.5) * step_y)``. Taps outside the
    frame take the frame's mean colour, so regions entirely off-frame come
    out exactly equal to it.
    """
    img = frame.rgb
    _, H, W = img.shape
    px = x0 + (np.arange(out_w) + 0.5) * step_x - 0.5
    py = y0 + (np.arange(out_h) + 0.5) * step_y - 0.5
    ix = np.floor(px).astype(np.int64)
    iy = np.floor(py).astype(np.int64)
    fx = px - ix
    fy = py - iy

    # pad once so that every tap lands in a valid index; pad value = mean colour
    lo_x, hi_x = max(0, -ix.min()), max(0, ix.max() + 2 - W)
    lo_y, hi_y = max(0, -iy.min()), max(0, iy.max() + 2 - H)
    if lo_x or hi_x or lo_y or hi_y:
        padded = np.empty((3, H + lo_y + hi_y, W + lo_x + hi_x))
        padded[:] = frame.mean_color[:, None, None]
        padded[:, lo_y : lo_y + H, lo_x : lo_x + W] = img
        img = padded
    ix = ix + lo_x
    iy = iy + lo_y

    rows0 = img[:, iy, :]
    rows1 = img[:, iy + 1, :]
    # lerp as a + t*(b - a) keeps constant regions exact
    top = rows0[:, :, ix] + fx * (rows0[:, :, ix + 1] - rows0[:, :, ix])
    bot = rows1[:, :, ix] + fx * (rows1[:, :, ix + 1] - rows1[:, :, ix])
    return top + fy[:, None] * (bot - top)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def exemplar_geometry(box: BBox) -> tuple[int, int, float, float]:
    """Output (rows, cols) and source extents (height, width) of the exemplar crop."""
    r = EXEMPLAR_SIZE / max(box.w, box.h)
    if box.w >= box.h:
        out_w, src_w = EXEMPLAR_SIZE, box.w
        out_h, src_h = _round_half_up(box.h * r), box.h
        if out_h < MIN_INPUT:
            out_h, src_h = MIN_INPUT, MIN_INPUT / r
    else:
        out_h, src_h = EXEMPLAR_SIZE, box.h
        out_w, src_w = _round_half_up(box.w * r), box.w
        if out_w < MIN_INPUT:
            out_w, src_w = MIN_INPUT, MIN_INPUT / r
    return out_h, out_w, src_h, src_w


def make_exemplar(frame: Frame, box: BBox) -> np.ndarray:
    """Target-only patch, long side 127 px, aspect kept.

    A short side that would fall under 87 px is widened with surrounding
    context at the same scale until it reaches 87 px.
    """
    out_h, out_w, src_h, src_w = exemplar_geometry(box)
    return resample(
        frame, box.cx - src_w / 2, box.cy - src_h / 2, src_w / out_w, src_h / out_h, out_h, out_w
    )


def context_side(box: BBox, multiplier: float = 1.0) -> float:
    """Source side S of the square search window (255/S equals 127/long side)."""
    return INSTANCE_SIZE * (max(box.w, box.h) / EXEMPLAR_SIZE) * multiplier


def make_instance(frame: Frame, box: BBox, multiplier: float = 1.0) -> tuple[np.ndarray, float]:
    """Square 255x255 search crop centred on ``box``; returns (crop, S)."""
    side = context_side(box, multiplier)
    step = side / INSTANCE_SIZE
    crop = resample(frame, box.cx - side / 2, box.cy - side / 2, step, step, INSTANCE_SIZE, INSTANCE_SIZE)
    return crop, side


def make_context_crop(frame: Frame, box: BBox) -> np.ndarray:
    return make_instance(frame, box)[0]


def make_semantic(first_frame: Frame, init_box: BBox) -> np.ndarray:
    """Semantic patch: the first frame's context crop around the initial box."""
    return make_context_crop(first_frame, init_box)
