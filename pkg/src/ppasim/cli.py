"""Command-line entry point: ``ppasim <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 protocol or
bridge error, 5 self-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bnn, bridge, config as cfg, tracker, trainer, world
from .ppa import NoiseModel

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4
EXIT_CHECK = 5

log = logging.getLogger("ppasim")


def _config_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="key = value configuration file")
    group = parent.add_argument_group("configuration overrides")
    kinds = {"int": int, "float": float, "str": str}
    for f in fields(cfg.Config):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kinds[f.type], default=None)
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    parser = argparse.ArgumentParser(prog="ppasim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-dataset", parents=[common], help="write train.loc and test.loc into data_dir")

    p = sub.add_parser("train", parents=[common], help="train and export a model")
    p.add_argument("--metrics", help="metrics CSV path (default data_dir/metrics.csv)")

    sub.add_parser("serve", parents=[common], help="run the vision host until interrupted")

    p = sub.add_parser("track", parents=[common], help="fly one tracking episode")
    p.add_argument("--in-process", action="store_true", help="run PPA inference without the bridge")
    p.add_argument("--out", help="track CSV path (default data_dir/track_<guidance>.csv)")
    p.add_argument("--latency-log", help="write per-frame round-trip latency CSV")

    p = sub.add_parser("compare", parents=[common], help="compare two track CSVs")
    p.add_argument("record_a")
    p.add_argument("record_b")
    p.add_argument("--out", help="write the summary to this file as well")

    sub.add_parser("selfcheck", parents=[common], help="PPA-vs-reference and protocol checks")
    return parser


def _noise(conf: cfg.Config) -> NoiseModel:
    return NoiseModel(conf.sigma_read, conf.sigma_op, conf.noise_seed)


def _gains(conf: cfg.Config) -> tracker.PidGains:
    return tracker.PidGains(conf.kp, conf.ki, conf.kd, conf.i_clamp, conf.v_max)


def _seeds(conf: cfg.Config) -> tracker.EpisodeSeeds:
    return tracker.EpisodeSeeds(conf.texture_seed, conf.jitter_seed, conf.trajectory_seed)


def cmd_gen_dataset(conf, args):
    jitter = world.CameraJitter(conf.sigma_trans, conf.sigma_rot, conf.jitter_seed)
    paths = world.generate_dataset(conf.data_dir, conf.n_train, conf.n_test, seed=conf.seed,
                                   texture_seed=conf.texture_seed, jitter=jitter)
    for path in paths:
        print(f"wrote {path}")


def cmd_train(conf, args):
    data = Path(conf.data_dir)
    tc = trainer.TrainConfig(data / "train.loc", epochs=conf.epochs, batch_size=conf.batch_size,
                             learning_rate=conf.learning_rate, seed=conf.train_seed, momentum=conf.momentum,
                             test_path=data / "test.loc", input_threshold=conf.input_threshold,
                             threshold_margin=conf.threshold_margin, margin_weight=conf.margin_weight)
    result = trainer.train(tc)
    Path(conf.model_path).parent.mkdir(parents=True, exist_ok=True)
    bnn.save_model(result.model, conf.model_path)
    metrics = args.metrics or data / "metrics.csv"
    trainer.write_metrics(result.history, metrics)
    last = result.history[-1]
    print(f"wrote {conf.model_path} and {metrics}")
    print(f"test acc_x={last.acc_x:.4f} acc_y={last.acc_y:.4f} acc_joint={last.acc_joint:.4f}")


def cmd_serve(conf, args):
    model = bnn.load_model(conf.model_path)
    host = bridge.VisionHost(conf.address, bridge.inference_handler(model, _noise(conf)))
    print(f"serving on {host.address}", flush=True)
    try:
        host.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        host.server_close()


def cmd_track(conf, args):
    out = args.out or Path(conf.data_dir) / f"track_{conf.guidance}.csv"
    client = None
    predictor = None
    if conf.guidance != "groundtruth":
        model = bnn.load_model(conf.model_path)
        if conf.guidance == "reference":
            predictor = tracker.reference_predictor(model)
        elif args.in_process:
            predictor = tracker.ppa_predictor(model, _noise(conf))
        else:
            client = bridge.VisionClient(conf.address, timeout=conf.timeout)
            predictor = tracker.bridge_predictor(client)
    try:
        record = tracker.run_episode(_seeds(conf), conf.guidance, conf.steps, predictor, _gains(conf),
                                     world.CameraJitter(conf.sigma_trans, conf.sigma_rot, conf.jitter_seed),
                                     csv_path=out)
    finally:
        if client is not None:
            client.close()
    if client is not None and args.latency_log:
        bridge.write_latency_log(args.latency_log, client.latencies)
    print(f"wrote {out} ({len(record)} rows)")
    print(f"mean_error_m = {record.mean_error():.6f}")
    print(f"out_of_view_steps = {record.out_of_view_steps}")
    if client is not None:
        s = bridge.latency_summary(client.latencies)
        print(f"latency p50_us = {s['p50_us']:.0f} p99_us = {s['p99_us']:.0f}")
    if record.aborted:
        print(f"episode aborted: {record.abort_reason}", file=sys.stderr)
        return EXIT_PROTOCOL
    return 0


def cmd_compare(conf, args):
    a = tracker.TrackRecord.from_csv(args.record_a)
    b = tracker.TrackRecord.from_csv(args.record_b)
    metrics = tracker.compare_runs(a, b)
    for key, value in metrics.items():
        print(f"{key} = {value:.6f}" if isinstance(value, float) else f"{key} = {value}")
    if args.out:
        tracker.write_summary(args.out, metrics)


def selfcheck(n_frames: int = 100, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Zero-noise PPA-vs-reference equivalence plus protocol round trips."""
    results = []
    rng = np.random.default_rng(seed)
    model = bnn.BnnModel.random(seed)
    mismatches = 0
    for _ in range(n_frames):
        frame = rng.integers(0, 256, (bnn.INPUT_SIZE, bnn.INPUT_SIZE), dtype=np.uint8)
        a = bnn.infer_ppa(model, frame, NoiseModel.noiseless())
        b = bnn.infer_reference(model, frame)
        if a.prediction != b.prediction or not np.array_equal(a.conv_planes, b.conv_planes):
            mismatches += 1
    results.append(("ppa == reference (zero noise)", mismatches == 0, f"{mismatches}/{n_frames} mismatches"))

    bad = 0
    for i in range(200):
        side = int(rng.integers(1, 65))
        msg = bridge.frame_message(int(rng.integers(0, 2**32)), rng.integers(0, 256, (side, side), dtype=np.uint8))
        wire = bridge.encode(msg)
        got = bridge.decode(wire)
        if got is None or got[0] != msg or got[1] != len(wire):
            bad += 1
    results.append(("codec round trip", bad == 0, f"{bad}/200 failures"))

    wire = bytearray(bridge.encode(bridge.frame_message(7, np.zeros((8, 8), np.uint8))))
    undetected = 0
    payload_bits = (len(wire) - 12) * 8
    for bit in range(payload_bits):
        corrupted = bytearray(wire)
        corrupted[8 + bit // 8] ^= 1 << (bit % 8)
        try:
            bridge.decode(corrupted)
            undetected += 1
        except bridge.CorruptionError:
            pass
    results.append(("single-bit corruption detected", undetected == 0, f"{undetected}/{payload_bits} missed"))

    try:
        with bridge.serve("127.0.0.1:0", bridge.inference_handler(model, NoiseModel.noiseless())) as host, \
                bridge.VisionClient(host.address) as client:
            ids = [5, 3, 9, 0, 2**32 - 1]
            got = [client.request_prediction(i, rng.integers(0, 256, (64, 64), dtype=np.uint8)).frame_id
                   for i in ids]
        results.append(("loopback request-reply", got == ids, f"ids {got}"))
    except (OSError, bridge.ProtocolError) as exc:
        results.append(("loopback request-reply", False, str(exc)))
    return results


def cmd_selfcheck(conf, args):
    results = selfcheck(seed=conf.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else EXIT_CHECK


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "serve": cmd_serve,
    "track": cmd_track,
    "compare": cmd_compare,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(cfg.Config)}
    try:
        conf = cfg.resolve(args.config, overrides)
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"# ppasim {args.command}")
    for line in conf.lines():
        print(f"# {line}")
    sys.stdout.flush()
    try:
        return COMMANDS[args.command](conf, args) or 0
    except (world.DatasetFormatError, bnn.ModelFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (cfg.ConfigError, trainer.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (bridge.ProtocolError, bridge.BridgeTimeout, bridge.Disconnected, bridge.StartupError) as exc:
        print(f"bridge error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
