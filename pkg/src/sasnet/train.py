"""Gaussian labels, logistic response loss, optimizers and the two training stages.

Stage 1 fits the backbone (and the response affine) on (Z, X) pairs with
plain mini-batch gradient descent. Stage 2 adds the semantic patch Z_s and
fits backbone and attention jointly with RMSprop, using separate learning
rates for the two groups.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import net
from . import tensor as T
from .crops import BBox, Frame, make_exemplar, make_instance, make_semantic
from .net import SasNetParams

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- labels & loss


@dataclass
class LabelMatrix:
    values: np.ndarray  # 1 x h x w
    sigma: float


def gaussian_label(h: int, w: int, sigma: float = 2.0) -> LabelMatrix:
    """Signed Gaussian 2*exp(-d^2 / 2 sigma^2) - 1 around the map centre."""
    if h < 1 or w < 1 or sigma <= 0:
        raise ValueError(f"bad label geometry h={h} w={w} sigma={sigma}")
    i = np.arange(h)[:, None] - (h - 1) / 2
    j = np.arange(w)[None, :] - (w - 1) / 2
    d2 = i**2 + j**2
    return LabelMatrix(values=(2.0 * np.exp(-d2 / (2.0 * sigma**2)) - 1.0)[None], sigma=sigma)


def pointwise_loss(r, y):
    return T.softplus(-np.asarray(y) * np.asarray(r))


def map_loss(response, label) -> float:
    values = label.values if isinstance(label, LabelMatrix) else label
    return float(T.logistic_loss(response, values).data)


# ---------------------------------------------------------------- samples


@dataclass
class TrainingSample:
    z: np.ndarray
    z_sem: np.ndarray
    x: np.ndarray
    label: np.ndarray


def make_sample(frame_a: Frame, box_a: BBox, frame_b: Frame, box_b: BBox, sigma=2.0) -> TrainingSample:
    """Exemplar and semantic patch from frame a, instance centred on the target in frame b."""
    z = make_exemplar(frame_a, box_a)
    z_sem = make_semantic(frame_a, box_a)
    x, _ = make_instance(frame_b, box_b)
    h, w = net.response_shape(z.shape[1:], x.shape[1:])
    return TrainingSample(z, z_sem, x, gaussian_label(h, w, sigma).values)


class PairDataset(Sequence):
    """Lazily rendered training samples, cached after first use unless ``cache`` is off."""

    def __init__(self, n: int, build: Callable[[int], TrainingSample], cache: bool = True):
        self._n = n
        self._build = build
        self._cache: dict[int, TrainingSample] | None = {} if cache else None

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if not 0 <= i < self._n:
            raise IndexError(i)
        if self._cache is None:
            return self._build(i)
        if i not in self._cache:
            self._cache[i] = self._build(i)
        return self._cache[i]


def synthetic_pairs(seed, n_pairs, cfg=None, max_gap=4, sigma=2.0, cache=True) -> PairDataset:
    from .synth import render_sequence

    def build(i):
        seq = render_sequence([seed, i], max_gap + 1, cfg)
        gap = int(np.random.default_rng([seed, i, 1]).integers(1, max_gap + 1))
        return make_sample(seq.frame(0), seq.boxes[0], seq.frame(gap), seq.boxes[gap], sigma)

    return PairDataset(n_pairs, build, cache)


def directory_pairs(root, sigma=2.0, max_gap=4, seed=0, pairs_per_sequence=None) -> PairDataset:
    """Pairs from sequence directories (anything below ``root`` with groundtruth.txt)."""
    from .crops import SequenceDir

    root = Path(root)
    seq_dirs = sorted({p.parent for p in root.rglob("groundtruth.txt")})
    if not seq_dirs:
        raise FileNotFoundError(f"no sequence directories with groundtruth.txt under {root}")
    index = []
    for d in seq_dirs:
        seq = SequenceDir.open(d)
        n = min(len(seq), len(seq.groundtruth))
        if n < 2:
            continue
        count = pairs_per_sequence or (n - 1)
        rng = np.random.default_rng([seed, len(index)])
        for k in range(count):
            a = k % (n - 1) if pairs_per_sequence is None else int(rng.integers(0, n - 1))
            b = min(n - 1, a + int(rng.integers(1, max_gap + 1)))
            index.append((seq, a, b))

    def build(i):
        seq, a, b = index[i]
        return make_sample(seq.frame(a), seq.groundtruth[a], seq.frame(b), seq.groundtruth[b], sigma)

    return PairDataset(len(index), build)


# ---------------------------------------------------------------- per-pair losses


def pair_loss(sample: TrainingSample, leaves, stage: int) -> T.Tensor:
    z_feat = net.backbone_forward(sample.z, leaves)
    x_feat = net.backbone_forward(sample.x, leaves)
    weights = None
    if stage == 2:
        weights = net.attention_forward(net.backbone_forward(sample.z_sem, leaves), leaves)
    _, squashed = net.attended_response(z_feat, x_feat, weights, leaves)
    return T.logistic_loss(squashed, sample.label)


def trainable_names(stage: int) -> tuple[str, ...]:
    return net.BACKBONE_NAMES if stage == 1 else net.PARAM_NAMES


def batch_gradient(params: SasNetParams, samples, stage: int):
    """Mean loss and mean gradient over ``samples``, reduced in list order."""
    names = trainable_names(stage)
    total = {n: np.zeros_like(params[n]) for n in names}
    loss_sum = 0.0
    for sample in samples:
        leaves = params.leaves()
        for n in names:
            leaves[n].requires_grad = True
        loss = pair_loss(sample, leaves, stage)
        T.backward(loss)
        loss_sum += float(loss.data)
        for n in names:
            if leaves[n].grad is not None:
                total[n] += leaves[n].grad
    k = len(samples)
    return loss_sum / k, {n: g / k for n, g in total.items()}


def dataset_loss(params, dataset, stage: int) -> float:
    leaves = params.leaves()
    return float(np.mean([float(pair_loss(s, leaves, stage).data) for s in dataset]))


# ---------------------------------------------------------------- optimizers


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name} (max |g| = {np.nanmax(np.abs(g))})")


def bgd_step(params: SasNetParams, grads: dict, lr: float) -> SasNetParams:
    """theta <- theta - lr * g for every tensor with a gradient; returns new params."""
    _check_finite(grads)
    out = params.copy()
    for name, g in grads.items():
        out[name] = params[name] - lr * g
    return out


@dataclass
class RMSpropState:
    v: dict = field(default_factory=dict)
    rho: float = 0.9
    eps: float = 1e-8


def rmsprop_step(params: SasNetParams, grads: dict, state: RMSpropState, lr_for: Callable[[str], float]):
    """v <- rho v + (1 - rho) g^2 ; theta <- theta - lr g / (sqrt(v) + eps)."""
    _check_finite(grads)
    out = params.copy()
    new_v = dict(state.v)
    for name, g in grads.items():
        v = state.rho * state.v.get(name, np.zeros_like(g)) + (1.0 - state.rho) * g * g
        new_v[name] = v
        out[name] = params[name] - lr_for(name) * g / (np.sqrt(v) + state.eps)
    if not out.all_finite():
        raise TrainingDiverged("non-finite parameters after RMSprop update")
    return out, RMSpropState(new_v, state.rho, state.eps)


# ---------------------------------------------------------------- training loops


@dataclass
class TrainConfig:
    stage: int = 1
    batch_pairs: int = 4
    lr_stage1: float = 0.001
    lr_theta_s_stage2: float = 0.0001
    lr_theta_att_stage2: float = 0.001
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    iterations: int = 1000
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if min(self.lr_stage1, self.lr_theta_s_stage2, self.lr_theta_att_stage2) < 0:
            raise ValueError("learning rates must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: SasNetParams
    history: list[tuple[int, float, float]]  # (iteration, loss, grad_norm)
    opt_state: RMSpropState | None = None


def batch_indices(seed: int, iteration: int, n: int, k: int) -> list[int]:
    rng = np.random.default_rng([seed, iteration])
    return [int(i) for i in rng.choice(n, size=k, replace=n < k)]


CHECKPOINT_RE = re.compile(r"params_iter(\d{8})\.sasn$")


def checkpoint_path(directory, iteration) -> Path:
    return Path(directory) / f"params_iter{iteration:08d}.sasn"


def latest_checkpoint(directory) -> tuple[int, Path] | None:
    found = []
    for p in Path(directory).glob("params_iter*.sasn"):
        m = CHECKPOINT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found) if found else None


def _save_checkpoint(directory, iteration, params, opt_state):
    Path(directory).mkdir(parents=True, exist_ok=True)
    net.save_params(params, checkpoint_path(directory, iteration))
    if opt_state is not None:
        net.save_tensors({f"rms.{k}": v for k, v in opt_state.v.items()},
                         Path(directory) / f"optstate_iter{iteration:08d}.sasn")


def _load_opt_state(directory, iteration, config) -> RMSpropState:
    path = Path(directory) / f"optstate_iter{iteration:08d}.sasn"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; cannot resume RMSprop state")
    v = {k[len("rms."):]: a for k, a in net.load_tensors(path).items()}
    return RMSpropState(v, config.rmsprop_decay, config.rmsprop_epsilon)


class TrainLog:
    """CSV log with columns iter,loss,grad_norm,lr; appends when resuming."""

    def __init__(self, path, resume_from: int | None = None):
        self.path = Path(path) if path else None
        if self.path is None:
            return
        if resume_from is not None and self.path.exists():
            rows = list(csv.reader(self.path.read_text().splitlines()))
            kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= resume_from]
            self.path.write_text("".join(",".join(r) + "\n" for r in kept))
        else:
            self.path.write_text("iter,loss,grad_norm,lr\n")

    def write(self, it, loss, grad_norm, lr):
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(f"{it},{loss!r},{grad_norm!r},{lr!r}\n")


def read_log(path) -> list[tuple[int, float, float, float]]:
    rows = list(csv.reader(Path(path).read_text().splitlines()))[1:]
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]


def _train(dataset, params, config: TrainConfig, *, log_path=None, checkpoint_dir=None,
           resume=False, callback=None) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    stage = config.stage
    start = 0
    opt_state = RMSpropState(rho=config.rmsprop_decay, eps=config.rmsprop_epsilon) if stage == 2 else None
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume needs a checkpoint directory")
        found = latest_checkpoint(checkpoint_dir)
        if found is not None:
            start, path = found
            params = net.load_params(path, widths=params.widths)
            if stage == 2:
                opt_state = _load_opt_state(checkpoint_dir, start, config)
            log.info("resuming from %s", path)
    train_log = TrainLog(log_path, resume_from=start if resume else None)

    if stage == 1:
        lr_report = config.lr_stage1
    else:
        lr_att, lr_s = config.lr_theta_att_stage2, config.lr_theta_s_stage2
        lr_report = lr_att

        def lr_for(name):
            return lr_att if name in net.ATTENTION_NAMES else lr_s

    history = []
    for it in range(start + 1, config.iterations + 1):
        idx = batch_indices(config.seed, it, len(dataset), config.batch_pairs)
        loss, grads = batch_gradient(params, [dataset[i] for i in idx], stage)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"iteration {it}: loss is {loss}")
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if stage == 1:
            params = bgd_step(params, grads, config.lr_stage1)
        else:
            params, opt_state = rmsprop_step(params, grads, opt_state, lr_for)
        history.append((it, loss, gnorm))
        if config.log_every and (it % config.log_every == 0 or it == config.iterations):
            log.info("stage %d iter %d loss %.6f |g| %.4g", stage, it, loss, gnorm)
        train_log.write(it, loss, gnorm, lr_report)
        if checkpoint_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            _save_checkpoint(checkpoint_dir, it, params, opt_state)
        if callback is not None and callback(it, params, loss):
            break
    return TrainResult(params, history, opt_state)


def train_stage1(dataset, config: TrainConfig, params: SasNetParams | None = None, **kwargs) -> TrainResult:
    """Minimise the mean map loss over bilinear responses (backbone + response affine)."""
    if config.stage != 1:
        raise ValueError("train_stage1 needs config.stage == 1")
    params = params if params is not None else net.init_params(config.seed)
    return _train(dataset, params, config, **kwargs)


def train_stage2(dataset, init_params: SasNetParams, config: TrainConfig, **kwargs) -> TrainResult:
    """Joint RMSprop over backbone and attention on attended responses."""
    if config.stage != 2:
        raise ValueError("train_stage2 needs config.stage == 2")
    return _train(dataset, init_params, config, **kwargs)
