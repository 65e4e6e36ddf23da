"""Run one rendered frame through the emulated focal-plane network.

Compares the noise-free PPA path, the noisy PPA path and the plain numpy
reference on the same frame, using a random model or one from disk.

    python demos/inference_walkthrough.py [model.bnn]
"""

import sys

import numpy as np

from ppasim import bnn, world
from ppasim.ppa import NoiseModel


def main(argv):
    model = bnn.load_model(argv[0]) if argv else bnn.BnnModel.random(seed=0)
    frames, lx, ly = world.generate_frames(1, np.random.default_rng(1), world.CameraJitter(),
                                           world.default_texture(0))
    frame = frames[0]
    print(f"true cell: ({lx[0]}, {ly[0]})")

    ref = bnn.infer_reference(model, frame)
    clean = bnn.infer_ppa(model, frame, NoiseModel.noiseless())
    noisy = bnn.infer_ppa(model, frame, NoiseModel(sigma_read=1.0, sigma_op=0.25, seed=0))

    for name, result in (("reference", ref), ("ppa, no noise", clean), ("ppa, default noise", noisy)):
        p = result.prediction
        print(f"{name:>20}: cell {p.labels}  scores_x {list(p.scores_x)}")

    assert clean.prediction == ref.prediction
    print(f"conv-plane agreement under noise: {bnn.agreement(clean.conv_planes, noisy.conv_planes):.3f}")
    print(f"active conv pixels per channel: {clean.conv_planes.reshape(model.channels, -1).sum(1).tolist()}")


if __name__ == "__main__":
    main(sys.argv[1:])
