"""SAS-Net: shared AlexNet-style backbone, inter-channel attention, correlation head.

Parameters live in a flat name -> ndarray mapping (``SasNetParams``) so that
optimizers, persistence and gradient checks can treat every tensor alike.
Forward functions take a mapping of ``Tensor`` leaves; ``params.leaves()``
wraps the arrays (optionally marking them for gradient recording).
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, ShapeSpec, Tensor

# (name, kernel, stride); conv widths come from the params
LAYERS = (
    ("conv1", 11, 2),
    ("pool1", 3, 2),
    ("conv2", 5, 1),
    ("pool2", 3, 2),
    ("conv3", 3, 1),
    ("conv4", 3, 1),
    ("conv5", 3, 1),
)
CONVS = ("conv1", "conv2", "conv3", "conv4", "conv5")
TABLE1_WIDTHS = (96, 256, 192, 192, 128)
# narrow replica with Table 1 geometry and the full 128-channel embedding
TOY_WIDTHS = (16, 32, 32, 32, 128)
# toy-width parameters trained on synthetic pairs (see README for the recipe)
TOY_PARAMS_PATH = Path(__file__).parent / "data" / "toy_params.sasn"

TOTAL_STRIDE = 8
EXEMPLAR_SIZE = 127
INSTANCE_SIZE = 255
MIN_INPUT = 87  # smallest extent whose conv5 output is >= 1
SEMANTIC_FEAT = 22
GRID_EDGES = (0, 6, 11, 16, 22)

BACKBONE_NAMES = tuple(f"{c}.{s}" for c in CONVS for s in ("w", "b")) + ("response.scale", "response.bias")
ATTENTION_NAMES = ("att.w",)
PARAM_NAMES = BACKBONE_NAMES + ATTENTION_NAMES

# counts backbone/attention evaluations; the tracker tests read it
forward_counts: Counter = Counter()


class ParamFormatError(ValueError):
    """Weight file is unreadable, truncated, or does not fit the schema."""


class SasNetParams(dict):
    """Name -> ndarray mapping for every learnable tensor."""

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self[f"{c}.w"].shape[0] for c in CONVS)

    @property
    def attention_count(self) -> int:
        return int(self["att.w"].size)

    def copy(self) -> "SasNetParams":
        return SasNetParams({k: v.copy() for k, v in self.items()})

    def leaves(self, requires_grad=False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def param_shapes(widths=TABLE1_WIDTHS) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 3
    kernels = {name: k for name, k, _ in LAYERS}
    for name, c_out in zip(CONVS, widths):
        k = kernels[name]
        shapes[f"{name}.w"] = (c_out, c_in, k, k)
        shapes[f"{name}.b"] = (c_out,)
        c_in = c_out
    shapes["response.scale"] = ()
    shapes["response.bias"] = ()
    shapes["att.w"] = (widths[-1], 4, 4)
    return shapes


def check_schema(params: SasNetParams, widths=TABLE1_WIDTHS):
    expected = param_shapes(widths)
    for name in PARAM_NAMES:
        if name not in params:
            raise ParamFormatError(f"missing tensor {name}")
        if tuple(params[name].shape) != expected[name]:
            raise ParamFormatError(
                f"{name.split('.')[0]}: tensor {name} has shape {tuple(params[name].shape)}, "
                f"expected {expected[name]}"
            )
    extra = set(params) - set(PARAM_NAMES)
    if extra:
        raise ParamFormatError(f"unexpected tensors {sorted(extra)}")
    if tuple(widths) == TABLE1_WIDTHS and params.attention_count != 2048:
        raise ParamFormatError(f"attention has {params.attention_count} parameters, expected 2048")


# conv weights start at INIT_GAIN times the He std: the response is
# standardised, so this only sets how fast the backbone moves under plain GD
INIT_GAIN = 0.1
RESPONSE_SCALE_INIT = 3.0


def label_prior_bias(h=17, w=17, sigma=2.0) -> float:
    """Constant score minimising the logistic loss against the h x w label map."""
    from .train import gaussian_label

    y = gaussian_label(h, w, sigma).values.ravel()
    b = 0.0
    for _ in range(50):  # Newton on a convex 1-D objective
        s = T.sigmoid_array(-y * b)
        grad = np.mean(-y * s)
        hess = np.mean(y * y * s * (1 - s))
        b -= grad / hess
    return float(b)


def init_params(seed: int, widths=TABLE1_WIDTHS, gain: float = INIT_GAIN) -> SasNetParams:
    """Scaled He-normal conv weights, zero conv biases, N(0, 1/16) attention.

    The response affine starts at scale 3 and at the bias that best fits the
    default 17x17 label map with a constant score.
    """
    rng = np.random.default_rng(seed)
    params = SasNetParams()
    for name, shape in param_shapes(widths).items():
        if name.endswith(".w") and name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
        elif name == "att.w":
            params[name] = rng.normal(0.0, 1.0 / 16.0, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["response.scale"] = np.array(RESPONSE_SCALE_INIT)
    params["response.bias"] = np.array(label_prior_bias())
    check_schema(params, widths)
    return params


# ---------------------------------------------------------------- shapes


def feature_shape(h: int, w: int) -> list[tuple[str, int, int]]:
    """Spatial extent after every backbone layer; raises naming the failing layer."""
    sizes = []
    for name, k, s in LAYERS:
        try:
            h, w = T.out_size(ShapeSpec(h, w, k, k, s, s))
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from None
        sizes.append((name, h, w))
    return sizes


def response_shape(exemplar_hw, instance_hw=(INSTANCE_SIZE, INSTANCE_SIZE)) -> tuple[int, int]:
    _, zh, zw = feature_shape(*exemplar_hw)[-1]
    _, xh, xw = feature_shape(*instance_hw)[-1]
    if zh > xh or zw > xw:
        raise ShapeError(f"exemplar feature {zh}x{zw} exceeds instance feature {xh}x{xw}")
    return xh - zh + 1, xw - zw + 1


# ---------------------------------------------------------------- forward


def backbone_forward(image, p: dict[str, Tensor], trace: list | None = None) -> Tensor:
    """conv1-pool1-conv2-pool2-conv3-conv4-conv5, ReLU after conv1..conv4 only.

    If ``trace`` is a list, (layer name, output shape) is appended per layer.
    """
    image = T.as_tensor(image)
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"backbone expects a 3xHxW image, got {image.shape}")
    feature_shape(image.shape[1], image.shape[2])
    forward_counts["backbone"] += 1
    x = image
    for name, k, s in LAYERS:
        if name.startswith("pool"):
            x = T.maxpool2d(x, k, s)
        else:
            x = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=s)
            if name != "conv5":
                x = T.relu(x)
        if trace is not None:
            trace.append((name, x.shape))
    return x


def grid_maxpool(feat) -> Tensor:
    """4x4 block max over a 22x22 map, blocks 6/5/5/6 cells along each axis."""
    feat = T.as_tensor(feat)
    if feat.data.ndim != 3 or feat.shape[1:] != (SEMANTIC_FEAT, SEMANTIC_FEAT):
        raise ShapeError(f"grid max pooling needs a Cx22x22 map, got {feat.shape}")
    return T.block_maxpool(feat, GRID_EDGES, GRID_EDGES)


def attention_forward(semantic_feat, p: dict[str, Tensor]) -> Tensor:
    """Channel weights sigmoid(<att.w[i], gridmax(feat)[i]>), one per channel."""
    pooled = grid_maxpool(semantic_feat)
    if pooled.shape != p["att.w"].shape:
        raise ShapeError(f"attention weights {p['att.w'].shape} vs pooled {pooled.shape}")
    forward_counts["attention"] += 1
    return T.sigmoid(T.channel_inner(p["att.w"], pooled))


def response_score(raw, p: dict[str, Tensor]) -> Tensor:
    """Score fed to the loss: scale * standardise(raw) + bias."""
    return T.affine(T.standardize(raw), p["response.scale"], p["response.bias"])


def attended_response(z_feat, x_feat, weights, p: dict[str, Tensor]):
    """Return (raw correlation, score) for attended features.

    ``weights=None`` skips the channel scaling (plain bilinear response).
    """
    if weights is not None:
        z_feat = T.channel_scale(z_feat, weights)
        x_feat = T.channel_scale(x_feat, weights)
    raw = T.xcorr(z_feat, x_feat)
    return raw, response_score(raw, p)


@dataclass
class ResponseMap:
    raw: np.ndarray
    activated: np.ndarray

    @property
    def peak(self) -> tuple[int, int]:
        _, i, j = np.unravel_index(np.argmax(self.raw), self.raw.shape)
        return int(i), int(j)


def _response_map(raw: Tensor, squashed: Tensor) -> ResponseMap:
    return ResponseMap(raw=raw.data, activated=T.sigmoid_array(squashed.data))


def _check_exemplar(z):
    z = T.as_tensor(z)
    h, w = z.shape[1:]
    if max(h, w) > INSTANCE_SIZE or min(h, w) < MIN_INPUT:
        raise ShapeError(f"exemplar {h}x{w} outside [{MIN_INPUT}, {INSTANCE_SIZE}] per axis")
    return z


def sasnet_forward(z, z_sem, x, params: SasNetParams, weights=None):
    """Full attended forward pass; returns (ResponseMap, channel weights).

    ``weights`` overrides the attention branch (used to probe the head).
    """
    p = params.leaves()
    if weights is None:
        w = attention_forward(backbone_forward(z_sem, p), p)
    else:
        w = T.as_tensor(np.asarray(weights, dtype=float))
    z_feat = backbone_forward(_check_exemplar(z), p)
    x_feat = backbone_forward(x, p)
    raw, squashed = attended_response(z_feat, x_feat, w, p)
    return _response_map(raw, squashed), w.data


def bilinear_forward(z, x, params: SasNetParams) -> ResponseMap:
    """Response without the attention branch (stage-1 path)."""
    p = params.leaves()
    z_feat = backbone_forward(_check_exemplar(z), p)
    x_feat = backbone_forward(x, p)
    return _response_map(*attended_response(z_feat, x_feat, None, p))


# ---------------------------------------------------------------- persistence

MAGIC = b"SASN"
VERSION = 1


def save_tensors(tensors: dict[str, np.ndarray], path):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParamFormatError(f"{path}: truncated while reading {what}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise ParamFormatError(f"{path}: bad magic, not a SASN weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ParamFormatError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParamFormatError(f"{path}: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(8 * size, f"{name} data"), dtype="<f8")
        tensors[name] = data.reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ParamFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors


def save_params(params: SasNetParams, path):
    save_tensors({name: params[name] for name in PARAM_NAMES}, path)


def load_params(path, widths=TABLE1_WIDTHS) -> SasNetParams:
    """Read a weight file and validate it against ``widths``.

    ``widths=None`` accepts any width chain that is internally consistent.
    """
    params = SasNetParams(load_tensors(path))
    if widths is None:
        if "conv1.w" not in params or "conv5.w" not in params:
            raise ParamFormatError(f"{path}: missing conv tensors")
        widths = tuple(params[f"{c}.w"].shape[0] if f"{c}.w" in params else -1 for c in CONVS)
    check_schema(params, widths)
    return params
