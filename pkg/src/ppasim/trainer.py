"""Straight-through-estimator training of the binarized localisation net.

The forward pass binarizes the latent weights and the conv activations with
sign (sign(0) = +1). The backward pass lets the gradient through the sign
wherever the pre-sign value lies in [-1, 1] (hard-clip STE). Training uses
momentum SGD with an optional cosine learning-rate decay, and latent weights
are clipped back to [-1, 1] after every update.

The loss is the sum of the softmax cross-entropies of the two heads, with
the integer head scores scaled by 1/sqrt(F) before the softmax.

Batch norm normalises with population statistics of the whole training set,
computed with the current binary kernels before the first epoch and after
every epoch. The training forward pass is therefore the exported network.
Its shift is learned as a threshold in conv-sum units,
``h = gamma * (z - t) / std``, and stored as the equivalent BN ``beta`` on
export. A BN shift works in units of the channel std, which is tiny for
channels that respond only to the car, so a step on ``beta`` barely moves
the threshold and every recalibration drags it along with the mean.

On the sensor every conv sum carries analogue noise, and one flipped pixel
is enough to flip a 4x4 OR-pool output. A hinge term, weighted by
``margin_weight``, pushes the maximum of every pooling block at least
``threshold_margin`` away from its channel threshold. The maximum is taken
on the side that turns the bit on. Each pooled bit counts once, so the
zero-padded border blocks weigh as much as the interior ones.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .bnn import INPUT_SIZE, KERNEL, N_BINS, POOL, BnnModel, predict_labels, save_model
from .world import read_dataset

log = logging.getLogger(__name__)

BN_EPS = 1e-5
# Conv sums are integers in [-9, 9]; these thresholds mean always-on/always-off.
# Just outside the analogue register range, so a constant channel stays constant under noise.
THRESHOLD_LIMIT = 128.5
THRESHOLD_GRID = 64


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class ExportError(ValueError):
    pass


# Pixel 88: between the car (24) and the floor band (100 to 235), with a wide
# margin against read noise.
DEFAULT_INPUT_THRESHOLD = -40.0
# About three times the std of a conv sum after nine analogue adds at sigma_op 0.25.
DEFAULT_THRESHOLD_MARGIN = 2.5
DEFAULT_MARGIN_WEIGHT = 5.0


@dataclass
class TrainConfig:
    dataset_path: Path | str
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float = 0.2
    seed: int = 0
    momentum: float = 0.9
    channels: int = 8
    test_path: Path | str | None = None
    schedule: str = "cosine"
    input_threshold: float = DEFAULT_INPUT_THRESHOLD
    threshold_margin: float = DEFAULT_THRESHOLD_MARGIN
    margin_weight: float = DEFAULT_MARGIN_WEIGHT

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not math.isfinite(self.input_threshold):
            raise ConfigError("input_threshold must be finite")
        if not 0 <= self.threshold_margin < math.inf or not 0 <= self.margin_weight < math.inf:
            raise ConfigError("threshold_margin and margin_weight must be finite and non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class LatentModel:
    """Real-valued shadow weights plus per-channel batch-norm state."""

    conv: np.ndarray          # (C, 3, 3)
    fc_x: np.ndarray          # (8, F)
    fc_y: np.ndarray          # (8, F)
    gamma: np.ndarray         # (C,)
    beta: np.ndarray          # (C,)
    running_mean: np.ndarray  # (C,)
    running_var: np.ndarray   # (C,)
    input_threshold: float = 0.0

    @classmethod
    def init(cls, seed: int, channels: int = 8, input_threshold: float = DEFAULT_INPUT_THRESHOLD) -> LatentModel:
        rng = np.random.default_rng(seed)
        f = channels * (INPUT_SIZE // POOL) ** 2
        return cls(
            conv=rng.uniform(-1, 1, (channels, KERNEL, KERNEL)),
            fc_x=rng.uniform(-0.1, 0.1, (N_BINS, f)),
            fc_y=rng.uniform(-0.1, 0.1, (N_BINS, f)),
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            input_threshold=input_threshold,
        )

    @property
    def channels(self) -> int:
        return self.conv.shape[0]

    def copy(self) -> LatentModel:
        return LatentModel(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                              for k, v in self.__dict__.items()})


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    loss_x: float
    loss_y: float
    margin_loss: float
    train_acc_x: float
    train_acc_y: float
    acc_x: float
    acc_y: float
    acc_joint: float


@dataclass
class TrainResult:
    latent: LatentModel
    model: BnnModel
    history: list[EpochMetrics] = field(default_factory=list)


def binarize(w: np.ndarray) -> np.ndarray:
    return np.where(w >= 0, 1.0, -1.0)


def input_bits(frames: np.ndarray, input_threshold: float = 0.0) -> np.ndarray:
    """Binarized network input in +1/-1 form, float32, shape (N, 64, 64)."""
    centred = frames.astype(np.int32) - 128
    return np.where(centred >= math.ceil(input_threshold), 1.0, -1.0).astype(np.float32)


def fold_threshold(mean: float, var: float, gamma: float, beta: float):
    """Fold batch norm followed by sign into a threshold on an integer conv sum.

    Returns ``(threshold, flip)`` such that for every integer v::

        sign(gamma * (v - mean) / sqrt(var + eps) + beta) >= 0
            <=>  (-v if flip else v) >= threshold

    The threshold keeps its trained position on a 1/64 grid but is kept at
    least 1/64 away from every integer, so float32 storage cannot change
    which integer sums it selects. Under analogue noise the boundary then
    sits where noise-aware training put it.
    """
    if not all(math.isfinite(x) for x in (mean, var, gamma, beta)) or var < 0:
        raise ExportError(f"non-finite batch-norm statistics: mean={mean} var={var}")
    std = math.sqrt(var + BN_EPS)
    if gamma == 0:
        return (-THRESHOLD_LIMIT if beta >= 0 else THRESHOLD_LIMIT), False
    t = mean - beta * std / gamma
    flip = gamma < 0
    if flip:
        t = -t
    top = math.ceil(t)
    t = min(max(round(t * THRESHOLD_GRID) / THRESHOLD_GRID, top - 1 + 1 / THRESHOLD_GRID),
            top - 1 / THRESHOLD_GRID)
    return float(min(max(t, -THRESHOLD_LIMIT), THRESHOLD_LIMIT)), flip


def implied_thresholds(latent: LatentModel) -> np.ndarray:
    """Per-channel threshold ``mean - beta * std / gamma`` in conv-sum units (the mean where gamma is 0)."""
    std = np.sqrt(latent.running_var + BN_EPS)
    safe = np.where(latent.gamma == 0, 1.0, latent.gamma)
    return np.where(latent.gamma == 0, latent.running_mean, latent.running_mean - latent.beta * std / safe)


def export(latent: LatentModel, path=None) -> BnnModel:
    """Binarize the latent model and fold batch norm into thresholds.

    A channel whose BN scale is negative has its kernel negated so that the
    folded comparison can stay ``>=``.
    """
    kernels = binarize(latent.conv)
    thresholds = np.empty(latent.channels)
    for c in range(latent.channels):
        thresholds[c], flip = fold_threshold(float(latent.running_mean[c]), float(latent.running_var[c]),
                                             float(latent.gamma[c]), float(latent.beta[c]))
        if flip:
            kernels[c] = -kernels[c]
    model = BnnModel(kernels, thresholds, binarize(latent.fc_x), binarize(latent.fc_y),
                     latent.input_threshold)
    if path is not None:
        save_model(model, path)
    return model


def sign_ste(x: torch.Tensor) -> torch.Tensor:
    """sign with sign(0) = +1 forward, identity gradient where |x| <= 1."""
    clipped = torch.clamp(x, -1.0, 1.0)
    hard = torch.where(x >= 0, 1.0, -1.0)
    return clipped + (hard - clipped).detach()


class _Net:
    """Torch view of a :class:`LatentModel` used during training."""

    def __init__(self, latent: LatentModel):
        def param(a):
            return torch.tensor(a, dtype=torch.float32, requires_grad=True)

        self.conv = param(latent.conv[:, None])
        self.fc_x = param(latent.fc_x)
        self.fc_y = param(latent.fc_y)
        self.gamma = param(latent.gamma)
        self.threshold = param(implied_thresholds(latent))
        self.running_mean = torch.tensor(latent.running_mean, dtype=torch.float32)
        self.running_var = torch.tensor(latent.running_var, dtype=torch.float32)
        self.input_threshold = latent.input_threshold
        self.scale = 1.0 / math.sqrt(self.fc_x.shape[1])

    def parameters(self):
        return [self.conv, self.fc_x, self.fc_y, self.gamma, self.threshold]

    def forward(self, frames: np.ndarray, margin: float = 0.0):
        """Head logits and the mean hinge shortfall of pooling-block maxima inside ``margin`` of their threshold."""
        x = torch.from_numpy(input_bits(frames, self.input_threshold))[:, None]
        z = F.conv2d(x, sign_ste(self.conv), padding=1)
        diff = z - self.threshold[None, :, None, None]
        h = diff * (self.gamma / torch.sqrt(self.running_var + BN_EPS))[None, :, None, None]
        # A pooled bit flips when its block max crosses zero, so the margin applies to the block max.
        side = torch.where(self.gamma >= 0, 1.0, -1.0)[None, :, None, None]
        shortfall = F.relu(margin - F.max_pool2d(diff * side, POOL).abs()).mean()
        feats = F.max_pool2d(sign_ste(h), POOL).flatten(1)
        return feats @ sign_ste(self.fc_x).T * self.scale, feats @ sign_ste(self.fc_y).T * self.scale, shortfall

    @torch.no_grad()
    def calibrate_(self, frames: np.ndarray, chunk: int = 500):
        """Set the BN statistics to the exact training-set moments."""
        k = torch.where(self.conv >= 0, 1.0, -1.0)
        total = torch.zeros(k.shape[0], dtype=torch.float64)
        total_sq = torch.zeros_like(total)
        for start in range(0, len(frames), chunk):
            x = torch.from_numpy(input_bits(frames[start:start + chunk], self.input_threshold))[:, None]
            z = F.conv2d(x, k, padding=1).double()
            total += z.sum(dim=(0, 2, 3))
            total_sq += (z * z).sum(dim=(0, 2, 3))
        n = len(frames) * INPUT_SIZE * INPUT_SIZE
        mean = total / n
        self.running_mean.copy_(mean)
        self.running_var.copy_((total_sq / n - mean * mean).clamp_min(0.0))

    @torch.no_grad()
    def clip_(self):
        for w in (self.conv, self.fc_x, self.fc_y):
            w.clamp_(-1.0, 1.0)

    def to_latent(self) -> LatentModel:
        def arr(t):
            return t.detach().numpy().astype(np.float64)

        gamma, mean, var = arr(self.gamma), arr(self.running_mean), arr(self.running_var)
        beta = gamma * (mean - arr(self.threshold)) / np.sqrt(var + BN_EPS)
        return LatentModel(arr(self.conv)[:, 0], arr(self.fc_x), arr(self.fc_y), gamma, beta, mean, var,
                           self.input_threshold)


def evaluate(model: BnnModel, frames, lx, ly) -> tuple[float, float, float]:
    """Per-axis and joint accuracy of the exported model (exact inference)."""
    if len(frames) == 0:
        return float("nan"), float("nan"), float("nan")
    px, py = predict_labels(model, frames)
    ok_x = px == lx
    ok_y = py == ly
    return float(ok_x.mean()), float(ok_y.mean()), float((ok_x & ok_y).mean())


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def train_arrays(config: TrainConfig, train_data, test_data=None, latent: LatentModel | None = None) -> TrainResult:
    """Train on in-memory (frames, labels_x, labels_y) tuples."""
    frames, lx, ly = train_data
    if len(frames) == 0:
        raise ConfigError("training set is empty")
    if test_data is None:
        test_data = (frames[:0], lx[:0], ly[:0])
    if latent is not None:
        latent = latent.copy()
    else:
        latent = LatentModel.init(config.seed, config.channels, config.input_threshold)
    rng = np.random.default_rng([config.seed, 1])
    tx = torch.as_tensor(np.asarray(lx, dtype=np.int64))
    ty = torch.as_tensor(np.asarray(ly, dtype=np.int64))
    result = TrainResult(latent=latent, model=export(latent))

    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # fixed reduction order
    try:
        net = _Net(latent)
        net.calibrate_(frames)
        opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum)
        n_batches = -(-len(frames) // config.batch_size)
        total_steps = config.epochs * n_batches
        step_no = 0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(frames))
            sum_x = sum_y = sum_m = 0.0
            hits_x = hits_y = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                sx, sy, shortfall = net.forward(frames[idx], config.threshold_margin)
                bx, by = tx[idx], ty[idx]
                loss_x = F.cross_entropy(sx, bx)
                loss_y = F.cross_entropy(sy, by)
                loss = loss_x + loss_y + config.margin_weight * shortfall
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss.item()} in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                if config.schedule == "cosine":
                    for group in opt.param_groups:
                        group["lr"] = 0.5 * config.learning_rate * (1 + math.cos(math.pi * step_no / total_steps))
                step_no += 1
                opt.step()
                net.clip_()
                sum_x += loss_x.item() * len(idx)
                sum_y += loss_y.item() * len(idx)
                sum_m += shortfall.item() * len(idx)
                hits_x += int((sx.argmax(1) == bx).sum())
                hits_y += int((sy.argmax(1) == by).sum())
            net.calibrate_(frames)
            latent = net.to_latent()
            model = export(latent)
            acc = evaluate(model, test_data[0], np.asarray(test_data[1]), np.asarray(test_data[2]))
            total = len(frames)
            metrics = EpochMetrics(epoch, (sum_x + sum_y) / total, sum_x / total, sum_y / total, sum_m / total,
                                   hits_x / total, hits_y / total, *acc)
            result.history.append(metrics)
            result.latent, result.model = latent, model
            log.info("epoch %d loss %.4f train %.3f/%.3f test %.3f/%.3f joint %.3f", epoch, metrics.loss,
                     metrics.train_acc_x, metrics.train_acc_y, *acc)
    finally:
        torch.set_num_threads(threads)
    return result


def train(config: TrainConfig) -> TrainResult:
    """Train from LOC1 files named in ``config``."""
    train_data = _load(config.dataset_path)
    test_data = _load(config.test_path) if config.test_path is not None else None
    return train_arrays(config, train_data, test_data)


def write_metrics(history: list[EpochMetrics], path) -> None:
    """Metrics CSV with columns epoch, loss, acc_x, acc_y, acc_joint (test accuracies)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "acc_x", "acc_y", "acc_joint"])
        for m in history:
            writer.writerow([m.epoch, f"{m.loss:.6f}", f"{m.acc_x:.6f}", f"{m.acc_y:.6f}", f"{m.acc_joint:.6f}"])
