"""Pixel-processor-array register emulation.

A PPA holds two kinds of per-pixel state that matter for binarized inference:
digital bit planes (DREG) and analogue planes (AREG). Digital operations are
exact. Every analogue write picks up Gaussian noise drawn from a seeded
:class:`NoiseModel`, and analogue values saturate to the register range.

Bit coding is fixed throughout the package: a stored 1 means +1 and a stored
0 means -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AREG_MIN = -128.0
AREG_MAX = 127.0

SENSOR_SIZE = 256
CNN_SIZE = 64


class ShapeError(ValueError):
    """Plane dimensions do not match what an operation requires."""


class ShiftRangeError(ValueError):
    """Shift distance is as large as the plane itself."""


def _square(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"{what} must be a square 2-D plane, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class BitPlane:
    """Square plane of single-bit registers, stored as uint8 in {0, 1}."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.bits, dtype=np.uint8, copy=True)
        _square(arr, "BitPlane")
        if arr.size and arr.max() > 1:
            raise ValueError("BitPlane entries must be 0 or 1")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def zeros(cls, size: int) -> BitPlane:
        return cls(np.zeros((size, size), dtype=np.uint8))

    @classmethod
    def ones(cls, size: int) -> BitPlane:
        return cls(np.ones((size, size), dtype=np.uint8))

    def pm(self) -> np.ndarray:
        """Return the plane in the +1/-1 algebra as int8."""
        return self.bits.astype(np.int8) * 2 - 1

    def __eq__(self, other):
        if not isinstance(other, BitPlane):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BitPlane({self.width}x{self.height}, ones={int(self.bits.sum())})"


@dataclass(frozen=True, eq=False)
class AnalogPlane:
    """Square plane of analogue registers, saturated to [-128, 127]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.clip(np.array(self.values, dtype=np.float64, copy=True), AREG_MIN, AREG_MAX)
        _square(arr, "AnalogPlane")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, size: int) -> AnalogPlane:
        return cls(np.zeros((size, size)))

    def __eq__(self, other):
        if not isinstance(other, AnalogPlane):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"AnalogPlane({self.width}x{self.height})"


@dataclass
class NoiseModel:
    """Additive Gaussian noise for analogue reads and arithmetic.

    The generator is created from ``seed`` on first use and advances with
    every noisy operation, so the same seed and the same sequence of calls
    give the same realisation. Call :meth:`reset` to rewind.
    """

    sigma_read: float = 1.0
    sigma_op: float = 0.25
    seed: int = 0
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.sigma_read < 0 or self.sigma_op < 0:
            raise ValueError("noise sigmas must be non-negative")

    @classmethod
    def noiseless(cls, seed: int = 0) -> NoiseModel:
        return cls(sigma_read=0.0, sigma_op=0.0, seed=seed)

    def reset(self):
        self._rng = None

    def _draw(self, sigma: float, shape) -> np.ndarray | float:
        # Zero sigma must not advance the stream, so noiseless runs stay exact.
        if sigma == 0:
            return 0.0
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return self._rng.normal(0.0, sigma, size=shape)

    def read(self, shape) -> np.ndarray | float:
        return self._draw(self.sigma_read, shape)

    def op(self, shape) -> np.ndarray | float:
        return self._draw(self.sigma_op, shape)


def load_image(pixels, noise: NoiseModel, size: int | None = None) -> AnalogPlane:
    """Read an 8-bit grayscale image into an analogue plane.

    Pixel values are centred by subtracting 128, read noise is added and the
    result saturates to the register range.
    """
    arr = np.asarray(pixels)
    _square(arr, "image")
    if size is not None and arr.shape != (size, size):
        raise ShapeError(f"expected {size}x{size} image, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    values = arr.astype(np.float64) - 128.0 + noise.read(arr.shape)
    return AnalogPlane(values)


def threshold(a: AnalogPlane, t: float) -> BitPlane:
    return BitPlane((a.values >= t).astype(np.uint8))


def shift(p: BitPlane, dx: int, dy: int) -> BitPlane:
    """Move plane contents by (dx, dy): out[y, x] = p[y - dy, x - dx].

    Cells shifted in from outside the array are 0.
    """
    n = p.width
    if abs(dx) >= n or abs(dy) >= p.height:
        raise ShiftRangeError(f"shift ({dx}, {dy}) out of range for {n}x{p.height} plane")
    out = np.zeros_like(p.bits)
    src = p.bits
    h, w = src.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        src[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return BitPlane(out)


def _same_shape(a, b):
    sa = a.bits.shape if isinstance(a, BitPlane) else a.values.shape
    sb = b.bits.shape if isinstance(b, BitPlane) else b.values.shape
    if sa != sb:
        raise ShapeError(f"plane shapes differ: {sa} vs {sb}")


def xnor(a: BitPlane, b: BitPlane) -> BitPlane:
    _same_shape(a, b)
    return BitPlane(1 - (a.bits ^ b.bits))


def bit_not(p: BitPlane) -> BitPlane:
    return BitPlane(1 - p.bits)


def bit_or(a: BitPlane, b: BitPlane) -> BitPlane:
    _same_shape(a, b)
    return BitPlane(a.bits | b.bits)


def popcount_global(p: BitPlane) -> int:
    return int(np.count_nonzero(p.bits))


def accumulate_shifted(a: AnalogPlane, p: BitPlane, dx: int, dy: int, sign: int,
                       noise: NoiseModel) -> AnalogPlane:
    """Add ``sign`` times the shifted plane (in +1/-1 form) to ``a``.

    Cells that were shifted in from the border add nothing rather than -1,
    which is what gives a zero-padded convolution.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    _same_shape(a, p)
    moved = shift(p, dx, dy).pm().astype(np.float64)
    # Mask of cells that came from inside the array.
    inside = shift(BitPlane.ones(p.width), dx, dy).bits
    values = a.values + sign * moved * inside + noise.op(a.values.shape)
    return AnalogPlane(values)


def or_pool(p: BitPlane, k: int) -> BitPlane:
    """Binary max-pool: OR over non-overlapping k x k windows.

    Built from PPA primitives: OR together the plane shifted by every offset
    inside the window, then sample the window's top-left pixel.
    """
    if p.width % k:
        raise ShapeError(f"plane size {p.width} not divisible by pool size {k}")
    acc = p
    for oy in range(k):
        for ox in range(k):
            if ox or oy:
                acc = bit_or(acc, shift(p, -ox, -oy))
    return BitPlane(acc.bits[::k, ::k])
