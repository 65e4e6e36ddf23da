"""Train a small model, then fly the drone with it over the loopback bridge.

Four thousand frames and six epochs keep this to a few minutes; the
acceptance suite uses the full 8,000/1,600 configuration.

    python demos/closed_loop.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from ppasim import bnn, bridge, tracker, trainer, world
from ppasim.ppa import NoiseModel


def main(argv):
    work = Path(argv[0]) if argv else Path(tempfile.mkdtemp(prefix="ppasim-"))
    train_path, test_path = world.generate_dataset(work, n_train=4000, n_test=400, seed=0)
    result = trainer.train(trainer.TrainConfig(train_path, epochs=6, test_path=test_path))
    last = result.history[-1]
    print(f"test accuracy x {last.acc_x:.3f}  y {last.acc_y:.3f}  joint {last.acc_joint:.3f}")
    bnn.save_model(result.model, work / "model.bnn")

    seeds = tracker.EpisodeSeeds()
    ref = tracker.run_episode(seeds, "reference", 300, tracker.reference_predictor(result.model))
    handler = bridge.inference_handler(result.model, NoiseModel())
    with bridge.serve("127.0.0.1:0", handler) as host, bridge.VisionClient(host.address) as client:
        ppa = tracker.run_episode(seeds, "ppa", 300, tracker.bridge_predictor(client),
                                  csv_path=work / "track_ppa.csv")
        lat = bridge.latency_summary(client.latencies)

    for key, value in tracker.compare_runs(ppa, ref).items():
        print(f"{key:>16}: {value}")
    print(f"bridge latency p50 {lat['p50_us']:.0f} us, p99 {lat['p99_us']:.0f} us")
    print(f"outputs in {work}")


if __name__ == "__main__":
    main(sys.argv[1:])
