"""Pick detector time sets on validation data.

Trains the reference nets (or loads them with --toy-net / --image-net),
scores every candidate time set on the validation split and prints AUROCs.
The best entry is what ``scoredd.recipes`` pins; test splits are never used.

    python scripts/select_t_sets.py [--toy-net PATH] [--image-net PATH] [--save-dir DIR]
"""

import argparse
import os

import numpy as np

from scoredd import recipes as R
from scoredd.checkpoint import load_checkpoint, save_checkpoint
from scoredd.detector import DetectConfig, detect, grid_t_set
from scoredd.evaluation import auroc, pixel_auroc
from scoredd.oracle import OracleScore, reference_mixture


def toy(net_path, save_dir):
    if net_path:
        net = load_checkpoint(net_path)
    else:
        net, _ = R.train_toy_net(R.toy_benchmark(0).train)
        if save_dir:
            save_checkpoint(net, os.path.join(save_dir, "toy.sddm"))
    val = R.toy_benchmark(1, n_train=10)
    x = np.concatenate([val.test_normal, val.test_anomalous])
    y = np.r_[np.zeros(len(val.test_normal)), np.ones(len(val.test_anomalous))]
    oracle = OracleScore(reference_mixture(), R.TOY_SPEC)
    print("toy: indices  net/feature_product  oracle/score_diff")
    for idx in R.TOY_CANDIDATES:
        ts = grid_t_set(R.TOY_SPEC, idx)
        a = auroc(detect(net, R.TOY_SPEC, DetectConfig(ts), x).scores, y)
        b = auroc(detect(oracle, R.TOY_SPEC, DetectConfig(ts, combine="score_diff"), x).scores, y)
        print(f"  {idx}  {a:.4f}  {b:.4f}")


def image(net_path, save_dir):
    if net_path:
        net = load_checkpoint(net_path)
    else:
        net, _ = R.train_image_net(R.image_split("train", 500).images)
        if save_dir:
            save_checkpoint(net, os.path.join(save_dir, "image.sddm"))
    val = R.image_split("val", 100)
    print("image: indices  image_auroc  pixel_auroc")
    for idx in R.IMAGE_CANDIDATES:
        res = detect(net, R.IMAGE_SPEC, DetectConfig(grid_t_set(R.IMAGE_SPEC, idx)), val.images)
        print(f"  {idx}  {auroc(res.scores, val.labels):.4f}  {pixel_auroc(res.maps, val.masks):.4f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--toy-net")
    p.add_argument("--image-net")
    p.add_argument("--save-dir")
    p.add_argument("--only", choices=("toy", "image"))
    a = p.parse_args()
    if a.only != "image":
        toy(a.toy_net, a.save_dir)
    if a.only != "toy":
        image(a.image_net, a.save_dir)


if __name__ == "__main__":
    main()
