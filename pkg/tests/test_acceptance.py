"""Acceptance suite: eight end-to-end criteria at their stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary. Criteria 1, 4, 6 and 7 write
their outputs under one directory per run, and criterion 8 repeats them in
a second directory and compares the files byte for byte.
"""

import csv
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from ppasim import bnn, bridge, config, ppa, trainer, tracker, world
from ppasim.bnn import BnnModel
from ppasim.ppa import AnalogPlane, BitPlane, NoiseModel

from oracles import dot_pm, popcount_loop, shift_loop, threshold_loop, xnor_loop

pytestmark = pytest.mark.slow

CONF = config.Config()

# Files that must be byte-identical between two runs. Latency logs hold wall-clock times and are excluded.
DETERMINISTIC_FILES = [
    "equivalence.csv",
    "data/train.loc", "data/test.loc", "data/model.bnn", "data/metrics.csv",
    "codec.txt", "loopback_track.csv", "loopback_predictions.csv",
    "track_groundtruth.csv", "track_reference.csv", "track_ppa.csv", "summary.txt",
]


@dataclass
class Run:
    out: Path
    seconds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    model: BnnModel | None = None
    test_frames: np.ndarray | None = None


def equivalence_stage(run: Run):
    """Criterion 1: 100 seeded random frames through both evaluators, zero noise."""
    start = time.perf_counter()
    model = BnnModel.random(CONF.seed)
    frames = np.random.default_rng(CONF.seed).integers(0, 256, (100, 64, 64), dtype=np.uint8)
    mismatches = []
    with open(run.out / "equivalence.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["frame", "label_x", "label_y", "scores_x", "scores_y", "conv_crc"])
        for i, frame in enumerate(frames):
            a = bnn.infer_ppa(model, frame, NoiseModel(0.0, 0.0, CONF.noise_seed))
            b = bnn.infer_reference(model, frame)
            same = (a.prediction == b.prediction and np.array_equal(a.conv_planes, b.conv_planes)
                    and np.array_equal(a.features, b.features) and np.array_equal(a.input_plane, b.input_plane))
            if not same:
                mismatches.append(i)
            p = a.prediction
            out.writerow([i, p.label_x, p.label_y, " ".join(map(str, p.scores_x)), " ".join(map(str, p.scores_y)),
                          zlib.crc32(a.conv_planes.tobytes())])
    run.metrics["equivalence_mismatches"] = mismatches
    run.seconds["equivalence"] = time.perf_counter() - start


def training_stage(run: Run):
    """Criterion 4: generate the desk-scale dataset and train with the default configuration."""
    start = time.perf_counter()
    data = run.out / "data"
    jitter = world.CameraJitter(CONF.sigma_trans, CONF.sigma_rot, CONF.jitter_seed)
    world.generate_dataset(data, CONF.n_train, CONF.n_test, seed=CONF.seed, texture_seed=CONF.texture_seed,
                           jitter=jitter)
    tc = trainer.TrainConfig(data / "train.loc", epochs=CONF.epochs, batch_size=CONF.batch_size,
                             learning_rate=CONF.learning_rate, seed=CONF.train_seed, momentum=CONF.momentum,
                             test_path=data / "test.loc", input_threshold=CONF.input_threshold,
                             threshold_margin=CONF.threshold_margin, margin_weight=CONF.margin_weight)
    result = trainer.train(tc)
    bnn.save_model(result.model, data / "model.bnn")
    trainer.write_metrics(result.history, data / "metrics.csv")
    run.seconds["training"] = time.perf_counter() - start

    frames, lx, ly = world.read_dataset(data / "test.loc")
    run.model = bnn.load_model(data / "model.bnn")
    run.test_frames = frames
    run.metrics["final"] = result.history[-1]
    run.metrics["recomputed"] = trainer.evaluate(run.model, frames, lx, ly)


def bridge_stage(run: Run):
    """Criterion 6: codec round trips, bit-flip detection and a 200-frame loopback episode."""
    start = time.perf_counter()
    rng = np.random.default_rng(CONF.seed)
    round_trip_failures = 0
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, bridge.MAX_FRAME_SIDE + 1, 2))
        frame = bridge.FramePayload(int(rng.integers(0, 2**32)), rng.integers(0, 256, (h, w), dtype=np.uint8))
        msg = bridge.Message(bridge.MsgType.FRAME, frame.to_bytes())
        wire = bridge.encode(msg)
        got = bridge.decode(wire)
        if got is None or got[0] != msg or got[1] != len(wire) or bridge.FramePayload.from_bytes(got[0].payload) != frame:
            round_trip_failures += 1

    missed = flips = 0
    samples = [
        bridge.frame_message(7, rng.integers(0, 256, (64, 64), dtype=np.uint8)),
        bridge.Message(bridge.MsgType.PREDICTION,
                       bridge.PredictionPayload(7, (5, -3, 0, 9, 1, 1, 1, 1), (0,) * 8, 3, 0).to_bytes()),
    ]
    for msg in samples:
        wire = bridge.encode(msg)
        for bit in range(len(msg.payload) * 8):
            corrupted = bytearray(wire)
            corrupted[8 + bit // 8] ^= 1 << (bit % 8)
            flips += 1
            try:
                bridge.decode(corrupted)
                missed += 1
            except bridge.CorruptionError:
                pass

    seeds = tracker.EpisodeSeeds(CONF.texture_seed, CONF.jitter_seed, CONF.trajectory_seed)
    handler = bridge.inference_handler(run.model, NoiseModel(CONF.sigma_read, CONF.sigma_op, CONF.noise_seed))
    with bridge.serve("127.0.0.1:0", handler) as host, bridge.VisionClient(host.address, CONF.timeout) as client:
        sent, predictions = [], []

        def predictor(frame_id, frame):
            sent.append(frame_id)
            reply = client.request_prediction(frame_id, frame)
            predictions.append(reply)
            return reply.labels

        record = tracker.run_episode(seeds, "ppa", 200, predictor, csv_path=run.out / "loopback_track.csv")

    with open(run.out / "loopback_predictions.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["frame_id", "label_x", "label_y", "scores_x", "scores_y"])
        for p in predictions:
            out.writerow([p.frame_id, p.label_x, p.label_y, " ".join(map(str, p.scores_x)),
                          " ".join(map(str, p.scores_y))])
    (run.out / "codec.txt").write_text(
        f"round_trip_failures = {round_trip_failures}\nbit_flips = {flips}\nmissed = {missed}\n")
    run.seconds["bridge"] = time.perf_counter() - start

    # Latency measurement over 1,000 loopback frames with a trivial handler, reported but not gated.
    def zero(frame):
        return bnn.PredictionDistribution.from_scores([0] * 8, [0] * 8)

    with bridge.serve("127.0.0.1:0", zero) as host, bridge.VisionClient(host.address, CONF.timeout) as client:
        frame = np.zeros((64, 64), np.uint8)
        for i in range(1000):
            client.request_prediction(i, frame)
        bridge.write_latency_log(run.out / "latency.csv", client.latencies)
        run.metrics["latency"] = bridge.latency_summary(client.latencies)

    run.metrics.update(round_trip_failures=round_trip_failures, flips=flips, missed=missed,
                       loopback_rows=len(record), loopback_aborted=record.aborted,
                       loopback_sent=len(sent),
                       loopback_ids_ok=(sent == [p.frame_id for p in predictions]
                                        == [r.time_step for r in record.rows if not r.out_of_view]))


def tracking_stage(run: Run):
    """Criterion 7: the preset 500-step trajectory under three kinds of guidance."""
    start = time.perf_counter()
    seeds = tracker.EpisodeSeeds(CONF.texture_seed, CONF.jitter_seed, CONF.trajectory_seed)
    gains = tracker.PidGains(CONF.kp, CONF.ki, CONF.kd, CONF.i_clamp, CONF.v_max)
    jitter = world.CameraJitter(CONF.sigma_trans, CONF.sigma_rot, CONF.jitter_seed)
    steps = CONF.steps
    gt = tracker.run_episode(seeds, "groundtruth", steps, gains=gains, jitter=jitter,
                             csv_path=run.out / "track_groundtruth.csv")
    ref = tracker.run_episode(seeds, "reference", steps, tracker.reference_predictor(run.model), gains, jitter,
                              csv_path=run.out / "track_reference.csv")
    handler = bridge.inference_handler(run.model, NoiseModel(CONF.sigma_read, CONF.sigma_op, CONF.noise_seed))
    with bridge.serve("127.0.0.1:0", handler) as host, bridge.VisionClient(host.address, CONF.timeout) as client:
        ppa_run = tracker.run_episode(seeds, "ppa", steps, tracker.bridge_predictor(client), gains, jitter,
                                      csv_path=run.out / "track_ppa.csv")
    compared = tracker.compare_runs(ppa_run, ref)
    tracker.write_summary(run.out / "summary.txt", compared)
    run.seconds["tracking"] = time.perf_counter() - start
    run.metrics.update(gt_error=gt.mean_error(after=60), ref_error=ref.mean_error(), ppa_error=ppa_run.mean_error(),
                       rmse=compared["rmse_m"], ppa_aborted=ppa_run.aborted, track_rows=(len(gt), len(ref), len(ppa_run)),
                       out_of_view=(ref.out_of_view_steps, ppa_run.out_of_view_steps))


def full_run(out: Path) -> Run:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(out)
    equivalence_stage(run)
    training_stage(run)
    bridge_stage(run)
    tracking_stage(run)
    return run


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="module")
def run_b(tmp_path_factory, run_a):
    return full_run(tmp_path_factory.mktemp("run_b"))


def test_zero_noise_equivalence(run_a, criterion):
    bad = run_a.metrics["equivalence_mismatches"]
    secs = run_a.seconds["equivalence"]
    criterion(1, not bad and secs < 10, f"{100 - len(bad)}/100 frames bit-exact, {secs:.1f} s (limit 10 s)")


def test_instruction_set_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(CONF.seed)
    failures = {"shift": 0, "xnor": 0, "popcount": 0, "threshold": 0, "complement": 0}
    for _ in range(1000):
        p = BitPlane(rng.integers(0, 2, (64, 64)))
        q = BitPlane(rng.integers(0, 2, (64, 64)))
        dx, dy = (int(v) for v in rng.integers(-3, 4, 2))
        pl = p.bits.tolist()
        failures["shift"] += ppa.shift(p, dx, dy).bits.tolist() != shift_loop(pl, dx, dy)
        failures["xnor"] += ppa.xnor(p, q).bits.tolist() != xnor_loop(pl, q.bits.tolist())
        failures["popcount"] += ppa.popcount_global(p) != popcount_loop(pl)
        a = AnalogPlane(rng.uniform(-128, 127, (64, 64)))
        t = float(rng.uniform(-100, 100))
        failures["threshold"] += ppa.threshold(a, t).bits.tolist() != threshold_loop(a.values.tolist(), t)
    for _ in range(100):
        p = BitPlane(rng.integers(0, 2, (64, 64)))
        failures["complement"] += ppa.popcount_global(p) + ppa.popcount_global(ppa.bit_not(p)) != 4096
    secs = time.perf_counter() - start
    detail = ", ".join(f"{k} {v} failures" for k, v in failures.items())
    criterion(2, sum(failures.values()) == 0 and secs < 10, f"{detail}; {secs:.1f} s (limit 10 s)")


def planes_for(n):
    """Split a length-n vector into square planes the way the FC head does."""
    side = {8: 2, 64: 8, 2048: 16}[n]
    return n // (side * side), side


def test_xnor_popcount_dot_product(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(CONF.seed)
    failures = 0
    for n in (8, 64, 2048):
        count, side = planes_for(n)
        for _ in range(1000):
            a = rng.choice([-1, 1], n)
            b = rng.choice([-1, 1], n)
            pa = (a > 0).astype(np.uint8).reshape(count, side, side)
            pb = (b > 0).astype(np.uint8).reshape(count, side, side)
            matches = sum(ppa.popcount_global(ppa.xnor(BitPlane(x), BitPlane(y))) for x, y in zip(pa, pb))
            failures += 2 * matches - n != dot_pm(a.tolist(), b.tolist())
    secs = time.perf_counter() - start
    criterion(3, failures == 0 and secs < 5, f"{3000 - failures}/3000 pairs exact; {secs:.1f} s (limit 5 s)")


def test_training_accuracy(run_a, criterion):
    m = run_a.metrics["final"]
    secs = run_a.seconds["training"]
    recomputed = run_a.metrics["recomputed"]
    ok = (m.acc_x >= 0.80 and m.acc_y >= 0.80 and m.acc_joint >= 0.65 and secs < 15 * 60
          and recomputed == (m.acc_x, m.acc_y, m.acc_joint))
    criterion(4, ok, f"acc_x {m.acc_x:.4f}, acc_y {m.acc_y:.4f} (need 0.80), joint {m.acc_joint:.4f} (need 0.65), "
                     f"exported-model recheck {'equal' if recomputed == (m.acc_x, m.acc_y, m.acc_joint) else 'DIFFERS'}; "
                     f"dataset + training {secs:.0f} s (limit 900 s)")


def test_noise_agreement(run_a, criterion):
    start = time.perf_counter()
    noise = NoiseModel(CONF.sigma_read, CONF.sigma_op, CONF.noise_seed)
    clean = NoiseModel(0.0, 0.0)
    conv, labels, clean_exact = [], [], True
    for frame in run_a.test_frames[:100]:
        a = bnn.infer_ppa(run_a.model, frame, clean)
        b = bnn.infer_ppa(run_a.model, frame, noise)
        clean_exact &= a.prediction == bnn.infer_reference(run_a.model, frame).prediction
        conv.append(bnn.agreement(a.conv_planes, b.conv_planes))
        labels.append(a.prediction.labels == b.prediction.labels)
    secs = time.perf_counter() - start
    ok = np.mean(conv) >= 0.90 and np.mean(labels) >= 0.85 and secs < 30 and clean_exact
    criterion(5, ok, f"conv agreement {np.mean(conv):.4f} (need 0.90), label agreement {np.mean(labels):.2f} "
                     f"(need 0.85) over 100 test frames; {secs:.1f} s (limit 30 s)")


def test_bridge(run_a, criterion):
    m = run_a.metrics
    secs = run_a.seconds["bridge"]
    ok = (m["round_trip_failures"] == 0 and m["missed"] == 0 and m["loopback_rows"] == 200
          and not m["loopback_aborted"] and m["loopback_ids_ok"] and secs < 30)
    lat = m["latency"]
    criterion(6, ok, f"{1000 - m['round_trip_failures']}/1000 round trips, {m['flips'] - m['missed']}/{m['flips']} "
                     f"bit flips caught, {m['loopback_rows']}/200 loopback steps, {m['loopback_sent']} frames sent, "
                     f"ids {'all matched' if m['loopback_ids_ok'] else 'MISMATCHED'}; {secs:.1f} s "
                     f"(limit 30 s); latency p50 {lat['p50_us']:.0f} us, p99 {lat['p99_us']:.0f} us")


def test_tracking(run_a, criterion):
    m = run_a.metrics
    secs = run_a.seconds["tracking"]
    ok = (m["gt_error"] < 0.3 and m["ref_error"] < 1.0 and m["rmse"] < 1.0 and not m["ppa_aborted"]
          and m["track_rows"] == (CONF.steps,) * 3 and secs < 120)
    criterion(7, ok, f"groundtruth error after step 60 {m['gt_error']:.3f} m (< 0.3), reference error "
                     f"{m['ref_error']:.3f} m (< 1.0), ppa error {m['ppa_error']:.3f} m, ppa-vs-reference RMSE "
                     f"{m['rmse']:.3f} m (< 1.0); {secs:.1f} s (limit 120 s)")


def test_determinism(run_a, run_b, criterion):
    differing = [name for name in DETERMINISTIC_FILES
                 if (run_a.out / name).read_bytes() != (run_b.out / name).read_bytes()]
    criterion(8, not differing, f"{len(DETERMINISTIC_FILES) - len(differing)}/{len(DETERMINISTIC_FILES)} output files "
                                f"byte-identical across two runs" + (f"; differing: {differing}" if differing else ""))
