"""Two-headed binarized localisation network.

Topology: 64x64 grayscale -> binarize -> one 3x3 binary conv layer with C
channels (batch norm folded into per-channel thresholds) -> 4x4 OR-pool ->
flatten (channel, row, col) to F bits -> two binary fully connected heads of
8 outputs each, one per image axis.

Two evaluators are provided. :func:`infer_ppa` runs the network as a sequence
of PPA register operations and is subject to analogue noise.
:func:`infer_reference` evaluates the same network with integer arithmetic.
With a noiseless :class:`~ppasim.ppa.NoiseModel` the two agree bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppa
from .ppa import AnalogPlane, BitPlane, NoiseModel, ShapeError

N_BINS = 8
INPUT_SIZE = 64
KERNEL = 3
POOL = 4

MODEL_MAGIC = b"BNN1"
_HEADER = struct.Struct("<4sHHHHHI")


class ModelFormatError(ValueError):
    """A model file is malformed."""


def _as_pm(arr, shape, what):
    arr = np.asarray(arr)
    if arr.shape != shape:
        raise ShapeError(f"{what} must have shape {shape}, got {arr.shape}")
    if not np.all(np.abs(arr) == 1):
        raise ValueError(f"{what} must contain only -1 and +1")
    out = arr.astype(np.int8)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class BnnModel:
    """Binary weights and folded thresholds of the localisation network.

    Attributes:
        conv_kernels: (C, 3, 3) array of +1/-1, applied as cross-correlation.
        conv_thresholds: (C,) thresholds on the integer conv sum.
        fc_x: (8, F) array of +1/-1 for the x head.
        fc_y: (8, F) array of +1/-1 for the y head.
        input_threshold: threshold on the centred pixel value (pixel - 128).
    """

    conv_kernels: np.ndarray
    conv_thresholds: np.ndarray
    fc_x: np.ndarray
    fc_y: np.ndarray
    input_threshold: float = 0.0

    def __post_init__(self):
        kernels = np.asarray(self.conv_kernels)
        if kernels.ndim != 3 or kernels.shape[1:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv_kernels must be (C, 3, 3), got {kernels.shape}")
        c = kernels.shape[0]
        f = c * (INPUT_SIZE // POOL) ** 2
        object.__setattr__(self, "conv_kernels", _as_pm(kernels, (c, KERNEL, KERNEL), "conv_kernels"))
        thr = np.array(self.conv_thresholds, dtype=np.float32).reshape(-1)
        if thr.shape != (c,):
            raise ShapeError(f"conv_thresholds must have {c} entries")
        thr.flags.writeable = False
        object.__setattr__(self, "conv_thresholds", thr)
        object.__setattr__(self, "fc_x", _as_pm(self.fc_x, (N_BINS, f), "fc_x"))
        object.__setattr__(self, "fc_y", _as_pm(self.fc_y, (N_BINS, f), "fc_y"))
        object.__setattr__(self, "input_threshold", float(np.float32(self.input_threshold)))

    @property
    def channels(self) -> int:
        return self.conv_kernels.shape[0]

    @property
    def features(self) -> int:
        return self.fc_x.shape[1]

    @classmethod
    def random(cls, seed: int, channels: int = 8, threshold_spread: float = 3.0) -> BnnModel:
        """Random model for testing; thresholds are half-integers near zero."""
        rng = np.random.default_rng(seed)
        f = channels * (INPUT_SIZE // POOL) ** 2
        return cls(
            conv_kernels=rng.choice([-1, 1], size=(channels, KERNEL, KERNEL)),
            conv_thresholds=np.round(rng.uniform(-threshold_spread, threshold_spread, channels)) + 0.5,
            fc_x=rng.choice([-1, 1], size=(N_BINS, f)),
            fc_y=rng.choice([-1, 1], size=(N_BINS, f)),
        )

    def __eq__(self, other):
        if not isinstance(other, BnnModel):
            return NotImplemented
        return (
            self.input_threshold == other.input_threshold
            and np.array_equal(self.conv_kernels, other.conv_kernels)
            and np.array_equal(self.conv_thresholds, other.conv_thresholds)
            and np.array_equal(self.fc_x, other.fc_x)
            and np.array_equal(self.fc_y, other.fc_y)
        )


@dataclass(frozen=True)
class PredictionDistribution:
    scores_x: tuple[int, ...]
    scores_y: tuple[int, ...]
    label_x: int
    label_y: int

    @classmethod
    def from_scores(cls, scores_x, scores_y) -> PredictionDistribution:
        sx = tuple(int(v) for v in scores_x)
        sy = tuple(int(v) for v in scores_y)
        # np.argmax returns the first maximum, i.e. ties go to the lower index.
        return cls(sx, sy, int(np.argmax(sx)), int(np.argmax(sy)))

    @property
    def labels(self) -> tuple[int, int]:
        return self.label_x, self.label_y


@dataclass(frozen=True, eq=False)
class InferenceResult:
    """Prediction plus the binary intermediates used for comparisons.

    ``conv_planes`` is (C, 64, 64) uint8 after thresholding and before
    pooling; ``features`` is the flattened pooled vector of F bits.
    """

    prediction: PredictionDistribution
    input_plane: np.ndarray
    conv_planes: np.ndarray
    features: np.ndarray
    extras: dict = field(default_factory=dict)


def _check_frame(frame) -> np.ndarray:
    arr = np.asarray(frame)
    if arr.shape != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"frame must be {INPUT_SIZE}x{INPUT_SIZE}, got {arr.shape}")
    return arr


def infer_ppa(model: BnnModel, frame, noise: NoiseModel) -> InferenceResult:
    """Run the network as PPA register operations."""
    frame = _check_frame(frame)
    areg = ppa.load_image(frame, noise, size=INPUT_SIZE)
    x = ppa.threshold(areg, model.input_threshold)

    conv_planes = []
    pooled = []
    for c in range(model.channels):
        acc = AnalogPlane.zeros(INPUT_SIZE)
        for ky in range(KERNEL):
            for kx in range(KERNEL):
                # Tap (ky, kx) reads input at (y + ky - 1, x + kx - 1).
                acc = ppa.accumulate_shifted(acc, x, 1 - kx, 1 - ky,
                                             int(model.conv_kernels[c, ky, kx]), noise)
        act = ppa.threshold(acc, float(model.conv_thresholds[c]))
        conv_planes.append(act)
        pooled.append(ppa.or_pool(act, POOL))

    def head(weights):
        scores = []
        g = INPUT_SIZE // POOL
        for w in weights.reshape(N_BINS, model.channels, g, g):
            matches = sum(
                ppa.popcount_global(ppa.xnor(BitPlane(wc > 0), pc))
                for wc, pc in zip(w, pooled)
            )
            scores.append(2 * matches - model.features)
        return scores

    pred = PredictionDistribution.from_scores(head(model.fc_x), head(model.fc_y))
    return InferenceResult(
        prediction=pred,
        input_plane=x.bits,
        conv_planes=np.stack([p.bits for p in conv_planes]),
        features=np.concatenate([p.bits.reshape(-1) for p in pooled]),
    )


def _reference_batch(model: BnnModel, frames: np.ndarray):
    """Exact integer evaluation for a stack of frames, shape (N, 64, 64)."""
    n = frames.shape[0]
    centred = frames.astype(np.int32) - 128
    # Integer pixels: v >= t  <=>  v >= ceil(t).
    x = (centred >= np.ceil(model.input_threshold)).astype(np.int8) * 2 - 1
    padded = np.zeros((n, INPUT_SIZE + 2, INPUT_SIZE + 2), dtype=np.int32)
    padded[:, 1:-1, 1:-1] = x
    conv = np.zeros((n, model.channels, INPUT_SIZE, INPUT_SIZE), dtype=np.int32)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            window = padded[:, ky:ky + INPUT_SIZE, kx:kx + INPUT_SIZE]
            conv += model.conv_kernels[None, :, ky, kx, None, None].astype(np.int32) * window[:, None]
    act = (conv >= model.conv_thresholds.astype(np.float64)[None, :, None, None]).astype(np.uint8)
    g = INPUT_SIZE // POOL
    pooled = act.reshape(n, model.channels, g, POOL, g, POOL).max(axis=(3, 5))
    feats = pooled.reshape(n, -1)
    f_pm = feats.astype(np.int32) * 2 - 1
    sx = f_pm @ model.fc_x.T.astype(np.int32)
    sy = f_pm @ model.fc_y.T.astype(np.int32)
    return (x > 0).astype(np.uint8), act, feats, sx, sy


def infer_reference(model: BnnModel, frame) -> InferenceResult:
    """Evaluate the network exactly, with no noise."""
    frame = _check_frame(frame)
    xin, act, feats, sx, sy = _reference_batch(model, frame[None])
    return InferenceResult(
        prediction=PredictionDistribution.from_scores(sx[0], sy[0]),
        input_plane=xin[0],
        conv_planes=act[0],
        features=feats[0],
    )


def predict_labels(model: BnnModel, frames) -> tuple[np.ndarray, np.ndarray]:
    """Reference labels for a batch of frames, shape (N, 64, 64)."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"frames must be (N, {INPUT_SIZE}, {INPUT_SIZE}), got {frames.shape}")
    out_x = np.empty(len(frames), dtype=np.int64)
    out_y = np.empty(len(frames), dtype=np.int64)
    for start in range(0, len(frames), 256):
        _, _, _, sx, sy = _reference_batch(model, frames[start:start + 256])
        out_x[start:start + 256] = sx.argmax(axis=1)
        out_y[start:start + 256] = sy.argmax(axis=1)
    return out_x, out_y


def agreement(a, b, value_range: float | None = None) -> float:
    """Similarity of two planes or score vectors, in [0, 1].

    Without ``value_range`` this is the fraction of equal elements, which is
    the right measure for binary planes. With ``value_range`` it is
    ``1 - mean|a - b| / value_range``, used for integer score vectors.
    """
    a = a.bits if isinstance(a, BitPlane) else np.asarray(a)
    b = b.bits if isinstance(b, BitPlane) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 1.0
    if value_range is None:
        return float(np.mean(a == b))
    if value_range <= 0:
        raise ValueError("value_range must be positive")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64)).mean()
    return float(max(0.0, 1.0 - diff / value_range))


def score_range(model: BnnModel) -> int:
    """Span of possible head scores, from -F to +F."""
    return 2 * model.features


# Model file layout (all multi-byte fields little-endian):
#   magic "BNN1" | u16 channels | u16 kernel | u16 input_size | u16 pool
#   | u16 bins | u32 features | f32 input_threshold | f32 x channels thresholds
#   | conv kernel bits | fc_x bits | fc_y bits
# Bit sections are packed MSB-first in row-major order, 1 = +1, 0 = -1,
# each padded with zero bits to a whole byte.

def _pack(pm: np.ndarray) -> bytes:
    return np.packbits((pm.reshape(-1) > 0).astype(np.uint8)).tobytes()


def _unpack(buf: bytes, offset: int, count: int):
    nbytes = (count + 7) // 8
    chunk = buf[offset:offset + nbytes]
    if len(chunk) != nbytes:
        raise ModelFormatError("model file truncated")
    bits = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8))[:count]
    return bits.astype(np.int8) * 2 - 1, offset + nbytes


def model_to_bytes(model: BnnModel) -> bytes:
    parts = [
        _HEADER.pack(MODEL_MAGIC, model.channels, KERNEL, INPUT_SIZE, POOL, N_BINS, model.features),
        struct.pack("<f", model.input_threshold),
        model.conv_thresholds.astype("<f4").tobytes(),
        _pack(model.conv_kernels),
        _pack(model.fc_x),
        _pack(model.fc_y),
    ]
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> BnnModel:
    if len(buf) < _HEADER.size:
        raise ModelFormatError("model file truncated")
    magic, c, k, size, pool, bins, f = _HEADER.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if (k, size, pool, bins) != (KERNEL, INPUT_SIZE, POOL, N_BINS) or f != c * (size // pool) ** 2:
        raise ModelFormatError(f"unsupported dimensions c={c} k={k} size={size} pool={pool} bins={bins} f={f}")
    off = _HEADER.size
    if len(buf) < off + 4 + 4 * c:
        raise ModelFormatError("model file truncated")
    (input_threshold,) = struct.unpack_from("<f", buf, off)
    off += 4
    thresholds = np.frombuffer(buf, dtype="<f4", count=c, offset=off).astype(np.float32)
    off += 4 * c
    kernels, off = _unpack(buf, off, c * k * k)
    fc_x, off = _unpack(buf, off, bins * f)
    fc_y, off = _unpack(buf, off, bins * f)
    if off != len(buf):
        raise ModelFormatError(f"{len(buf) - off} trailing bytes in model file")
    return BnnModel(kernels.reshape(c, k, k), thresholds, fc_x.reshape(bins, f),
                    fc_y.reshape(bins, f), input_threshold)


def save_model(model: BnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> BnnModel:
    return model_from_bytes(Path(path).read_bytes())
