"""Regenerate the sample pair, tiny model and golden fused image in src/lrrfuse/data.

Run only when the network or synthetic generator changes on purpose; the
golden test compares ``lrrfuse fuse`` output against these files byte for byte.
"""
from pathlib import Path

import numpy as np

from lrrfuse import imageio
from lrrfuse import network as net
from lrrfuse import trainer as tr

DATA = Path(__file__).resolve().parents[1] / "src" / "lrrfuse" / "data"


def main():
    ir, vi = tr.synthetic_pair(np.random.default_rng(2024), 64)
    imageio.write_gray(DATA / "sample_ir.png", ir[0])
    imageio.write_gray(DATA / "sample_vi.png", vi[0])

    cfg = tr.TrainConfig(learning_rate=1e-3, batch_size=4, image_size=32, seed=0, max_iterations=20, N=8, k=3, T=2)
    params, _ = tr.train(cfg, tr.synthetic_dataset(16, 32, seed=0), net.init_params(0, 8, 3, 2), threads=1)
    params.metadata["note"] = "tiny sample model, 20 Adam steps on synthetic 32x32 pairs"
    net.save_params(params, DATA / "tiny_model.lrrw")

    model = net.load_params(DATA / "tiny_model.lrrw")
    fused = net.fuse_image(imageio.read_gray(DATA / "sample_ir.png"), imageio.read_gray(DATA / "sample_vi.png"), model)
    imageio.write_gray(DATA / "golden_fused.png", fused)


if __name__ == "__main__":
    main()
