"""Planted-channel problem for checking that the attention branch can learn.

The backbone is made block-diagonal so that exactly one conv5 channel sees
only the red input plane, and every other channel sees only green and blue.
Pairs carry the tracked target (as luminance) in red only; green and blue
come from unrelated scenes in each frame, so they hold clutter with no
correspondence between exemplar and instance. Only the planted channel
predicts the label, and a working attention branch should weight it up.
"""

from __future__ import annotations

import numpy as np

from . import net
from .crops import Frame
from .synth import SynthConfig, render_sequence
from .train import PairDataset, make_sample

GROUP = 4  # width of the red-only path through conv1..conv4


def planted_params(seed: int, widths=net.TOY_WIDTHS, group: int = GROUP, gain: float = 1.0):
    """Block-diagonal initial parameters; returns (params, planted channel index).

    Uses unit gain so conv5 features, and hence the pooled attention inputs,
    are of order one rather than shrunk by the default small-gain init.
    """
    params = net.init_params(seed, widths, gain=gain)
    channel = int(np.random.default_rng([seed, 11]).integers(widths[-1]))

    def keep_block(w, rows, cols):
        # rescale to the He std of the reduced fan-in
        n_in = w.shape[1]
        n_keep = len(range(n_in)[cols])
        w[rows, cols] *= np.sqrt(n_in / n_keep)

    w = params["conv1.w"]
    w[:group, 1:] = 0.0
    w[group:, 0] = 0.0
    keep_block(w, slice(None, group), slice(0, 1))
    keep_block(w, slice(group, None), slice(1, None))
    for name in net.CONVS[1:4]:
        w = params[f"{name}.w"]
        w[:group, group:] = 0.0
        w[group:, :group] = 0.0
        keep_block(w, slice(None, group), slice(None, group))
        keep_block(w, slice(group, None), slice(group, None))
    w = params["conv5.w"]
    keep = w[channel, :group].copy()
    w[:, :group] = 0.0
    w[channel] = 0.0
    w[channel, :group] = keep
    keep_block(w, np.arange(w.shape[0]) != channel, slice(group, None))
    keep_block(w, channel, slice(None, group))
    return params, channel


def planted_frame(target_rgb: np.ndarray, clutter_rgb: np.ndarray) -> Frame:
    """Red = target scene luminance; green/blue = an unrelated scene."""
    rgb = np.empty_like(target_rgb)
    rgb[0] = target_rgb.mean(axis=0)
    rgb[1:] = clutter_rgb[1:]
    return Frame.from_array(rgb)


def planted_pairs(seed, n_pairs: int, cfg: SynthConfig | None = None, max_gap=4, sigma=2.0) -> PairDataset:
    def build(i):
        seq = render_sequence([seed, i, 0], max_gap + 1, cfg)
        gap = int(np.random.default_rng([seed, i, 1]).integers(1, max_gap + 1))
        clutter_a = render_sequence([seed, i, 2], 1, cfg).frame(0).rgb
        clutter_b = render_sequence([seed, i, 3], 1, cfg).frame(0).rgb
        frame_a = planted_frame(seq.frame(0).rgb, clutter_a)
        frame_b = planted_frame(seq.frame(gap).rgb, clutter_b)
        return make_sample(frame_a, seq.boxes[0], frame_b, seq.boxes[gap], sigma)

    return PairDataset(n_pairs, build)


def calibrate_channel(params, channel: int, patch: np.ndarray):
    """Scale the planted conv5 row so its response spread on ``patch`` matches the median channel.

    No ReLU follows conv5, so scaling the row and its bias scales the feature
    exactly. This keeps an accidental small activation from hiding the channel.
    """
    out = params.copy()
    feat = net.backbone_forward(patch, out.leaves()).data
    spread = feat.std(axis=(1, 2))
    k = np.median(np.delete(spread, channel)) / spread[channel]
    w, b = out["conv5.w"].copy(), out["conv5.b"].copy()
    w[channel] *= k
    b[channel] *= k
    out["conv5.w"], out["conv5.b"] = w, b
    return out


def planted_problem(seed: int, n_pairs: int, widths=net.TOY_WIDTHS, cfg: SynthConfig | None = None):
    """Calibrated parameters, planted channel and training pairs for one seed.

    The attention planes start at zero, so every channel weight starts at
    exactly 0.5 and any rise of the planted channel above the median is learned.
    """
    params, channel = planted_params(seed, widths)
    data = planted_pairs(seed, n_pairs, cfg)
    params = calibrate_channel(params, channel, data[0].z_sem)
    params["att.w"] = np.zeros_like(params["att.w"])
    return params, channel, data


def channel_rank(weights: np.ndarray, channel: int) -> float:
    """Fraction of channels whose weight is strictly below the planted one's."""
    weights = np.asarray(weights)
    return float(np.mean(np.delete(weights, channel) < weights[channel]))


def mean_channel_weights(params, dataset) -> np.ndarray:
    """Attention output averaged over the semantic patches of ``dataset``."""
    leaves = params.leaves()
    ws = [net.attention_forward(net.backbone_forward(s.z_sem, leaves), leaves).data for s in dataset]
    return np.mean(ws, axis=0)
