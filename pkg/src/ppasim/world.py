"""Top-down world simulator standing in for the robot simulator.

The world is a flat textured floor with one car on it and a drone hovering
above at a fixed altitude. The drone's downward camera sees an 8 m x 8 m
window centred under it, rendered at 256 x 256 and box-filtered to 64 x 64
for the network.

Camera frame convention: image column grows with camera ``u`` and image row
grows with camera ``v``. Without rotation jitter ``u`` is world x and ``v``
is world y. ``label_x`` bins ``u`` and ``label_y`` bins ``v``.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage

from .ppa import ShapeError

SENSOR_SIZE = 256
CNN_SIZE = 64
N_BINS = 8

MAP_EXTENT = 16.0
VIEW_SIDE = 8.0
V_MAX = 0.25

CAR_LENGTH = 0.9
CAR_WIDTH = 0.5
CAR_LEVEL = 24

DATASET_MAGIC = b"LOC1"
_RECORD = CNN_SIZE * CNN_SIZE + 2


class DatasetFormatError(ValueError):
    pass


class CarPose(NamedTuple):
    x: float
    y: float
    heading: float


class JitterSample(NamedTuple):
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0


NO_JITTER = JitterSample()


@dataclass(frozen=True)
class CameraJitter:
    """Random camera pose perturbation standing in for drone vibration."""

    sigma_trans: float = 0.15
    sigma_rot: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.sigma_trans < 0 or self.sigma_rot < 0:
            raise ValueError("jitter sigmas must be non-negative")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def draw(self, rng: np.random.Generator) -> JitterSample:
        dx, dy = rng.normal(0.0, 1.0, 2) * self.sigma_trans
        dtheta = rng.normal(0.0, 1.0) * self.sigma_rot
        return JitterSample(float(dx), float(dy), float(dtheta))


@dataclass(frozen=True)
class WorldState:
    car: CarPose
    drone: tuple[float, float]
    map_extent: float = MAP_EXTENT
    texture_seed: int = 0
    time_step: int = 0


# ---------------------------------------------------------------------------
# floor texture

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _lattice(ix: np.ndarray, iy: np.ndarray, key: int) -> np.ndarray:
    """Deterministic uniform [0, 1) value per integer lattice point."""
    with np.errstate(over="ignore"):
        h = _mix64(ix.astype(np.int64).view(np.uint64) + np.uint64(key))
        h = _mix64(h ^ iy.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B97F4A7C15))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(x: np.ndarray, y: np.ndarray, cell: float, key: int) -> np.ndarray:
    """Smooth value noise in [0, 1] on a lattice of spacing ``cell`` metres."""
    gx = np.asarray(x) / cell
    gy = np.asarray(y) / cell
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    tx = _smooth(gx - x0)
    ty = _smooth(gy - y0)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    if ix.size == 0:
        return np.zeros(ix.shape)
    # Hash only the lattice block the query touches, then gather.
    bx, by = ix.min(), iy.min()
    gx_idx = np.arange(bx, ix.max() + 2)
    gy_idx = np.arange(by, iy.max() + 2)
    table = _lattice(gx_idx[None, :], gy_idx[:, None], key)
    jx = ix - bx
    jy = iy - by
    v00 = table[jy, jx]
    v10 = table[jy, jx + 1]
    v01 = table[jy + 1, jx]
    v11 = table[jy + 1, jx + 1]
    top = v00 + tx * (v10 - v00)
    bottom = v01 + tx * (v11 - v01)
    return top + ty * (bottom - top)


@dataclass(frozen=True)
class FloorTexture:
    """Multi-octave value noise mapped to a mid-gray intensity band.

    The octave sum is stretched around its mean and squashed with tanh, so
    the floor shows blotchy light and dark patches between ``low`` and
    ``high``. Intensity depends only on the seed and world coordinates.
    """

    seed: int = 0
    octaves: tuple[tuple[float, float], ...] = ((0.8, 0.3), (0.4, 0.4), (0.2, 0.3))
    low: float = 100.0
    high: float = 235.0
    contrast: float = 3.0

    def __call__(self, x, y) -> np.ndarray:
        total = np.zeros(np.broadcast(x, y).shape)
        for i, (cell, weight) in enumerate(self.octaves):
            total += weight * value_noise(x, y, cell, key=self.seed * 1000003 + i * 7919)
        norm = sum(w for _, w in self.octaves)
        s = np.tanh(self.contrast * (total / norm - 0.5))
        return 0.5 * (self.low + self.high) + 0.5 * (self.high - self.low) * s


class RasterTexture:
    """Texture sampled from a precomputed raster with bilinear lookup.

    Points outside the raster fall back to evaluating ``source`` directly.
    The raster covers the map plus a margin wide enough for any view whose
    centre stays on the map.
    """

    def __init__(self, source: Callable, extent: float = MAP_EXTENT, margin: float = 6.5,
                 per_metre: int = 48):
        self.source = source
        self.origin = -margin
        self.per_metre = per_metre
        n = int(round((extent + 2 * margin) * per_metre)) + 1
        coords = self.origin + np.arange(n) / per_metre
        gx, gy = np.meshgrid(coords, coords)
        self.raster = np.asarray(source(gx, gy), dtype=np.float64)
        self.limit = n - 1

    def __call__(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        col = (x - self.origin) * self.per_metre
        row = (y - self.origin) * self.per_metre
        inside = (col >= 0) & (col <= self.limit) & (row >= 0) & (row <= self.limit)
        out = ndimage.map_coordinates(self.raster, [row.ravel(), col.ravel()], order=1,
                                      mode="nearest").reshape(x.shape)
        if not inside.all():
            out = np.where(inside, out, self.source(x, y))
        return out


@functools.lru_cache(maxsize=4)
def default_texture(seed: int) -> RasterTexture:
    return RasterTexture(FloorTexture(seed))


def constant_texture(level: float) -> Callable:
    def texture(x, y):
        return np.full(np.broadcast(x, y).shape, float(level))
    return texture


# ---------------------------------------------------------------------------
# camera geometry

def camera_center(drone, jitter: JitterSample = NO_JITTER) -> tuple[float, float]:
    return drone[0] + jitter.dx, drone[1] + jitter.dy


def world_to_camera(point, drone, jitter: JitterSample = NO_JITTER,
                    ) -> tuple[float, float]:
    """Offset (u, v) of a world point from the jittered camera centre."""
    cx, cy = camera_center(drone, jitter)
    dx, dy = point[0] - cx, point[1] - cy
    c, s = math.cos(jitter.dtheta), math.sin(jitter.dtheta)
    return c * dx + s * dy, -s * dx + c * dy


def camera_to_world(u, v, drone, jitter: JitterSample = NO_JITTER):
    cx, cy = camera_center(drone, jitter)
    c, s = math.cos(jitter.dtheta), math.sin(jitter.dtheta)
    return cx + c * u - s * v, cy + s * u + c * v


def pixel_centers(size: int, view_side: float = VIEW_SIDE) -> np.ndarray:
    return (np.arange(size) + 0.5) * (view_side / size) - view_side / 2


def car_mask(wx, wy, car: CarPose) -> np.ndarray:
    dx = wx - car.x
    dy = wy - car.y
    c, s = math.cos(car.heading), math.sin(car.heading)
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (np.abs(along) <= CAR_LENGTH / 2) & (np.abs(across) <= CAR_WIDTH / 2)


def render(world: WorldState, jitter: JitterSample = NO_JITTER, texture: Callable | None = None,
           size: int = SENSOR_SIZE, view_side: float = VIEW_SIDE) -> np.ndarray:
    """Orthographic top-down view under the drone as 8-bit grayscale."""
    if texture is None:
        texture = default_texture(world.texture_seed)
    centers = pixel_centers(size, view_side)
    u, v = np.meshgrid(centers, centers)  # u varies along columns, v along rows
    wx, wy = camera_to_world(u, v, world.drone, jitter)
    img = np.asarray(texture(wx, wy), dtype=np.float64)
    img = np.where(car_mask(wx, wy, world.car), CAR_LEVEL, img)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def downsample(img) -> np.ndarray:
    """4x4 box average from 256x256 to 64x64, rounding halves up."""
    img = np.asarray(img)
    if img.shape != (SENSOR_SIZE, SENSOR_SIZE):
        raise ShapeError(f"expected {SENSOR_SIZE}x{SENSOR_SIZE} image, got {img.shape}")
    k = SENSOR_SIZE // CNN_SIZE
    sums = img.astype(np.int32).reshape(CNN_SIZE, k, CNN_SIZE, k).sum(axis=(1, 3))
    return ((sums + k * k // 2) // (k * k)).astype(np.uint8)


def pose_to_label(offset, view_side: float = VIEW_SIDE) -> tuple[int, int] | None:
    """Bin an offset from the view centre into (label_x, label_y).

    Bins are half-open ``[lo, hi)``. Returns None when either coordinate
    falls outside the view.
    """
    if view_side <= 0:
        raise ValueError("view_side must be positive")
    width = view_side / N_BINS
    bins = tuple(math.floor((o + view_side / 2) / width) for o in offset)
    if all(0 <= b < N_BINS for b in bins):
        return bins
    return None


def car_label(world: WorldState, jitter: JitterSample = NO_JITTER,
              view_side: float = VIEW_SIDE) -> tuple[int, int] | None:
    return pose_to_label(world_to_camera(world.car, world.drone, jitter), view_side)


def observe(world: WorldState, jitter: JitterSample = NO_JITTER, texture: Callable | None = None) -> np.ndarray:
    """64x64 network input for the current world state."""
    return downsample(render(world, jitter, texture))


def write_pgm(path, img) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


# ---------------------------------------------------------------------------
# datasets

def write_dataset(path, images, labels_x, labels_y) -> None:
    """Write a LOC1 file.

    Layout: magic "LOC1", u32 little-endian record count, then per record
    4096 row-major pixel bytes, one label_x byte and one label_y byte.
    """
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    if images.shape[1:] != (CNN_SIZE, CNN_SIZE):
        raise ShapeError(f"images must be (N, 64, 64), got {images.shape}")
    records = np.empty((n, _RECORD), dtype=np.uint8)
    records[:, :-2] = images.reshape(n, -1)
    records[:, -2] = labels_x
    records[:, -1] = labels_y
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<I", n) + records.tobytes())


def read_dataset(path):
    """Read a LOC1 file into (images, labels_x, labels_y)."""
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise DatasetFormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + n * _RECORD:
        raise DatasetFormatError(f"{path}: expected {n} records, size is {len(buf)} bytes")
    records = np.frombuffer(buf, dtype=np.uint8, offset=8).reshape(n, _RECORD)
    lx = records[:, -2].astype(np.int64)
    ly = records[:, -1].astype(np.int64)
    if n and (lx.max() >= N_BINS or ly.max() >= N_BINS):
        raise DatasetFormatError(f"{path}: label out of range")
    return records[:, :-2].reshape(n, CNN_SIZE, CNN_SIZE).copy(), lx, ly


def sample_frame(rng: np.random.Generator, jitter: CameraJitter, texture: Callable,
                 map_extent: float = MAP_EXTENT, view_side: float = VIEW_SIDE):
    """Place drone, camera jitter and car at random; return (image, label_x, label_y)."""
    half = view_side / 2
    drone = tuple(rng.uniform(half, map_extent - half, 2))
    jit = jitter.draw(rng)
    # Offsets drawn in the jittered camera frame, so the car is always in view.
    u, v = rng.uniform(-half, half, 2)
    heading = rng.uniform(0.0, 2 * math.pi)
    cx, cy = camera_to_world(u, v, drone, jit)
    world = WorldState(car=CarPose(cx, cy, heading), drone=drone)
    label = car_label(world, jit, view_side)
    if label is None:  # rounding at the exact upper edge
        label = tuple(min(max(b, 0), N_BINS - 1) for b in
                      (math.floor((o + half) / (view_side / N_BINS)) for o in (u, v)))
    return observe(world, jit, texture), label[0], label[1]


def generate_frames(n: int, rng: np.random.Generator, jitter: CameraJitter, texture: Callable):
    images = np.empty((n, CNN_SIZE, CNN_SIZE), dtype=np.uint8)
    lx = np.empty(n, dtype=np.uint8)
    ly = np.empty(n, dtype=np.uint8)
    for i in range(n):
        images[i], lx[i], ly[i] = sample_frame(rng, jitter, texture)
    return images, lx, ly


def generate_dataset(out_dir, n_train: int, n_test: int, seed: int = 0, texture_seed: int = 0,
                     jitter: CameraJitter | None = None) -> tuple[Path, Path]:
    """Write ``train.loc`` and ``test.loc`` under ``out_dir``.

    Train and test frames come from independent child streams of ``seed``.
    The jitter object's own seed is not used here; jitter draws come from
    the same per-split stream as the poses.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be at least 1")
    jitter = jitter or CameraJitter()
    texture = default_texture(texture_seed)
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "train.loc", out / "test.loc"
    for path, n, seq in zip(paths, (n_train, n_test), (train_seq, test_seq)):
        images, lx, ly = generate_frames(n, np.random.default_rng(seq), jitter, texture)
        write_dataset(path, images, lx, ly)
    return paths


# ---------------------------------------------------------------------------
# trajectory and stepping

@dataclass(frozen=True)
class TrajectorySpec:
    """Preset car path: a two-term Lissajous curve plus slow seeded wobble.

    Position at step k::

        x(k) = cx + ax * sin(2*pi*fx*k/period + phase) + wobble_x(k)
        y(k) = cy + ay * sin(2*pi*fy*k/period)         + wobble_y(k)

    where each wobble is ``wobble_amp * 0.5 * sum(sin(2*pi*g_j*k/period + psi_j))``
    over two terms whose frequencies g_j in [0.5, 2.5] and phases psi_j are
    drawn from ``wobble_seed``. ``kind="stationary"`` holds ``center``.
    """

    kind: str = "lissajous"
    center: tuple[float, float] = (8.0, 8.0)
    amp: tuple[float, float] = (4.5, 4.5)
    cycles: tuple[float, float] = (1.0, 2.0)
    period: int = 500
    phase: float = math.pi / 2
    wobble_amp: float = 0.6
    wobble_seed: int = 0
    heading: float = 0.0

    def __post_init__(self):
        if self.kind not in ("lissajous", "stationary"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    @classmethod
    def stationary(cls, x: float, y: float, heading: float = 0.0) -> TrajectorySpec:
        return cls(kind="stationary", center=(x, y), heading=heading)

    def _wobble_terms(self):
        rng = np.random.default_rng(self.wobble_seed)
        freqs = rng.uniform(0.5, 2.5, size=(2, 2))
        phases = rng.uniform(0.0, 2 * math.pi, size=(2, 2))
        return freqs, phases

    def position(self, k: float) -> tuple[float, float]:
        return tuple(float(p) for p in self._eval(np.asarray(k, dtype=np.float64))[0])

    def _eval(self, k):
        if self.kind == "stationary":
            return (np.array([self.center[0] + 0 * k, self.center[1] + 0 * k]),
                    np.array([0 * k, 0 * k]))
        w = 2 * math.pi / self.period
        freqs, phases = self._wobble_terms()
        args = (w * self.cycles[0] * k + self.phase, w * self.cycles[1] * k)
        pos = [self.center[i] + self.amp[i] * np.sin(args[i]) for i in range(2)]
        vel = [self.amp[i] * w * self.cycles[i] * np.cos(args[i]) for i in range(2)]
        for axis in range(2):
            for j in range(2):
                a = w * freqs[axis, j] * k + phases[axis, j]
                pos[axis] = pos[axis] + 0.5 * self.wobble_amp * np.sin(a)
                vel[axis] = vel[axis] + 0.5 * self.wobble_amp * w * freqs[axis, j] * np.cos(a)
        return np.array(pos), np.array(vel)

    def pose(self, k: int) -> CarPose:
        if self.kind == "stationary":
            return CarPose(self.center[0], self.center[1], self.heading)
        pos, vel = self._eval(np.float64(k))
        return CarPose(float(pos[0]), float(pos[1]), math.atan2(float(vel[1]), float(vel[0])))


def _inside(value: float, extent: float) -> float:
    return min(max(value, 0.0), math.nextafter(extent, 0.0))


def clamp_velocity(velocity, v_max: float = V_MAX) -> tuple[float, float]:
    vx, vy = float(velocity[0]), float(velocity[1])
    speed = math.hypot(vx, vy)
    if speed > v_max:
        vx, vy = vx * v_max / speed, vy * v_max / speed
    return vx, vy


def initial_world(trajectory: TrajectorySpec, texture_seed: int = 0, drone=None,
                  map_extent: float = MAP_EXTENT) -> WorldState:
    car = trajectory.pose(0)
    if drone is None:
        drone = (car.x, car.y)
    return WorldState(car=car, drone=(float(drone[0]), float(drone[1])), map_extent=map_extent,
                      texture_seed=texture_seed)


def step(world: WorldState, drone_velocity, trajectory: TrajectorySpec,
         v_max: float = V_MAX) -> WorldState:
    """Advance one step: move the car along its path and the drone by the command.

    The command is scaled down to ``v_max`` if faster. Positions stay inside
    the map square.
    """
    vx, vy = clamp_velocity(drone_velocity, v_max)
    k = world.time_step + 1
    car = trajectory.pose(k)
    car = CarPose(_inside(car.x, world.map_extent), _inside(car.y, world.map_extent), car.heading)
    drone = (_inside(world.drone[0] + vx, world.map_extent), _inside(world.drone[1] + vy, world.map_extent))
    return replace(world, car=car, drone=drone, time_step=k)
