"""Closed-loop drone tracking driven by localisation predictions.

Each step renders the camera view, asks a predictor for the car's cell,
converts the cell centre to a world position relative to the drone and
steers the drone toward it with a per-axis PID controller.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import world as w
from .bnn import BnnModel, infer_ppa, infer_reference
from .bridge import BridgeTimeout, Disconnected, ProtocolError, VisionClient
from .ppa import NoiseModel

GUIDANCE_MODES = ("ppa", "reference", "groundtruth")

CSV_COLUMNS = ["step", "car_x", "car_y", "drone_x", "drone_y", "label_pred_x", "label_pred_y",
               "pred_x", "pred_y", "error_m", "out_of_view"]


def label_to_position(label_x: int, label_y: int, drone, view_side: float = w.VIEW_SIDE) -> tuple[float, float]:
    """World position of the centre of cell (label_x, label_y) in the drone's view."""
    if not (0 <= label_x < w.N_BINS and 0 <= label_y < w.N_BINS):
        raise ValueError(f"labels ({label_x}, {label_y}) outside 0..{w.N_BINS - 1}")
    cell = view_side / w.N_BINS
    return (drone[0] + (label_x + 0.5) * cell - view_side / 2,
            drone[1] + (label_y + 0.5) * cell - view_side / 2)


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.3
    ki: float = 0.02
    kd: float = 0.1
    i_clamp: float = 2.0
    v_max: float = w.V_MAX

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be non-negative")
        if self.i_clamp <= 0:
            raise ValueError("i_clamp must be positive")
        if self.v_max < 0:
            raise ValueError("v_max must be non-negative")


@dataclass(frozen=True)
class PidState:
    integral: tuple[float, float] = (0.0, 0.0)
    prev_error: tuple[float, float] = (0.0, 0.0)


def pid_step(gains: PidGains, error, state: PidState) -> tuple[tuple[float, float], PidState]:
    """One discrete PID update (unit time step) per axis.

    The integral is clamped to +-i_clamp per axis, and the command vector
    is scaled down to v_max when faster.
    """
    e = np.asarray(error, dtype=np.float64)
    if e.shape != (2,) or not np.all(np.isfinite(e)):
        raise ValueError(f"error must be a finite 2-vector, got {error!r}")
    integral = np.clip(np.asarray(state.integral) + e, -gains.i_clamp, gains.i_clamp)
    derivative = e - np.asarray(state.prev_error)
    v = np.asarray(gains.kp) * e + np.asarray(gains.ki) * integral + np.asarray(gains.kd) * derivative
    cmd = w.clamp_velocity(v, gains.v_max)
    return cmd, PidState(tuple(integral.tolist()), tuple(e.tolist()))


@dataclass(frozen=True)
class TrackRow:
    time_step: int
    car_x: float
    car_y: float
    drone_x: float
    drone_y: float
    label_x: int
    label_y: int
    pred_x: float
    pred_y: float
    error: float
    out_of_view: bool


@dataclass
class TrackRecord:
    guidance: str
    rows: list[TrackRow] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self):
        return len(self.rows)

    def append(self, row: TrackRow):
        if self.rows and row.time_step <= self.rows[-1].time_step:
            raise ValueError("track rows must be strictly increasing in time_step")
        self.rows.append(row)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    @property
    def drone_path(self) -> np.ndarray:
        return np.array([(r.drone_x, r.drone_y) for r in self.rows]).reshape(-1, 2)

    @property
    def car_path(self) -> np.ndarray:
        return np.array([(r.car_x, r.car_y) for r in self.rows]).reshape(-1, 2)

    def mean_error(self, after: int = 0) -> float:
        errs = [r.error for r in self.rows if r.time_step >= after]
        return float(np.mean(errs)) if errs else float("nan")

    @property
    def out_of_view_steps(self) -> int:
        return sum(r.out_of_view for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([r.time_step, f"{r.car_x:.6f}", f"{r.car_y:.6f}", f"{r.drone_x:.6f}",
                                 f"{r.drone_y:.6f}", r.label_x, r.label_y, f"{r.pred_x:.6f}",
                                 f"{r.pred_y:.6f}", f"{r.error:.6f}", int(r.out_of_view)])

    @classmethod
    def from_csv(cls, path, guidance: str = "unknown") -> TrackRecord:
        rec = cls(guidance)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec.append(TrackRow(int(row["step"]), float(row["car_x"]), float(row["car_y"]),
                                    float(row["drone_x"]), float(row["drone_y"]), int(row["label_pred_x"]),
                                    int(row["label_pred_y"]), float(row["pred_x"]), float(row["pred_y"]),
                                    float(row["error_m"]), row["out_of_view"] == "1"))
        return rec


Predictor = Callable[[int, np.ndarray], "tuple[int, int]"]


def reference_predictor(model: BnnModel) -> Predictor:
    return lambda frame_id, frame: infer_reference(model, frame).prediction.labels


def ppa_predictor(model: BnnModel, noise: NoiseModel | None = None) -> Predictor:
    noise = noise if noise is not None else NoiseModel()
    return lambda frame_id, frame: infer_ppa(model, frame, noise).prediction.labels


def bridge_predictor(client: VisionClient) -> Predictor:
    return lambda frame_id, frame: client.request_prediction(frame_id, frame).labels


@dataclass(frozen=True)
class EpisodeSeeds:
    texture_seed: int = 0
    jitter_seed: int = 0
    trajectory_seed: int = 0


def run_episode(seeds: EpisodeSeeds, guidance: str, steps: int, predictor: Predictor | None = None,
                gains: PidGains = PidGains(), jitter: w.CameraJitter | None = None,
                trajectory: w.TrajectorySpec | None = None, drone_start=None, csv_path=None) -> TrackRecord:
    """Fly one tracking episode.

    ``predictor`` maps ``(frame_id, 64x64 frame)`` to a label pair and is
    required for ``ppa`` and ``reference`` guidance. ``groundtruth``
    guidance steers at the true car position and never renders.

    When the car is outside the camera view the last predicted target is
    held and the row is flagged ``out_of_view``. A bridge timeout,
    disconnect or protocol error ends the episode early with ``aborted``
    set on the partial record.
    """
    if guidance not in GUIDANCE_MODES:
        raise ValueError(f"guidance must be one of {GUIDANCE_MODES}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if guidance != "groundtruth" and predictor is None:
        raise ValueError(f"{guidance} guidance needs a predictor")
    jitter = jitter if jitter is not None else w.CameraJitter(seed=seeds.jitter_seed)
    if trajectory is None:
        trajectory = w.TrajectorySpec(wobble_seed=seeds.trajectory_seed)
    texture = w.default_texture(seeds.texture_seed)
    world = w.initial_world(trajectory, seeds.texture_seed, drone_start)
    jrng = jitter.rng()
    state = PidState()
    record = TrackRecord(guidance)
    labels = (w.N_BINS // 2, w.N_BINS // 2)
    target = (world.car.x, world.car.y)

    for k in range(steps):
        jit = jitter.draw(jrng)
        truth = w.car_label(world, jit)
        out_of_view = truth is None
        if not out_of_view:
            if guidance == "groundtruth":
                labels = truth
                target = (world.car.x, world.car.y)
            else:
                frame = w.observe(world, jit, texture)
                try:
                    labels = tuple(int(v) for v in predictor(k, frame))
                except (BridgeTimeout, Disconnected, ProtocolError, OSError) as exc:
                    record.aborted = True
                    record.abort_reason = f"step {k}: {type(exc).__name__}: {exc}"
                    break
                target = label_to_position(*labels, world.drone)
        error = (target[0] - world.drone[0], target[1] - world.drone[1])
        cmd, state = pid_step(gains, error, state)
        record.append(TrackRow(
            world.time_step, world.car.x, world.car.y, world.drone[0], world.drone[1], labels[0], labels[1],
            target[0], target[1], math.hypot(world.car.x - world.drone[0], world.car.y - world.drone[1]),
            out_of_view,
        ))
        world = w.step(world, cmd, trajectory, gains.v_max)

    if csv_path is not None:
        record.to_csv(csv_path)
    return record


def compare_runs(a: TrackRecord, b: TrackRecord) -> dict[str, float]:
    """Tracking error of both runs and the deviation between their drone paths."""
    if len(a) != len(b):
        raise ValueError(f"records differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("records are empty")
    dev = np.linalg.norm(a.drone_path - b.drone_path, axis=1)
    return {
        "mean_error_a_m": a.mean_error(),
        "mean_error_b_m": b.mean_error(),
        "rmse_m": float(np.sqrt(np.mean(dev ** 2))),
        "max_dev_m": float(dev.max()),
        "steps": len(a),
    }


def write_summary(path, metrics: dict) -> None:
    lines = [f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")

