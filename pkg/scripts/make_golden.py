"""Write the golden anomaly-map PGMs used by the image acceptance test.

    python scripts/make_golden.py [--image-net PATH]

Without ``--image-net`` the reference texture net is trained first (several
minutes).  Writes map/image/mask PGMs for a few test images to tests/golden.
"""

import argparse
import os

import numpy as np

from scoredd import recipes as R
from scoredd.checkpoint import load_checkpoint
from scoredd.detector import DetectConfig, detect, grid_t_set
from scoredd.evaluation import auroc, pixel_auroc
from scoredd.formats import write_pgm

OUT = os.path.join(os.path.dirname(__file__), os.pardir, "tests", "golden")


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--image-net")
    p.add_argument("--count", type=int, default=8)
    a = p.parse_args()
    if a.image_net:
        net = load_checkpoint(a.image_net)
    else:
        net, _ = R.train_image_net(R.image_split("train", 500).images)
    test = R.image_split("test", 100)
    res = detect(net, R.IMAGE_SPEC, DetectConfig(grid_t_set(R.IMAGE_SPEC, R.IMAGE_T_INDEX)), test.images)
    print(f"image AUROC {auroc(res.scores, test.labels):.4f}  pixel AUROC {pixel_auroc(res.maps, test.masks):.4f}")
    os.makedirs(OUT, exist_ok=True)
    defective = np.flatnonzero(test.labels == 1)[: a.count - 2]
    normal = np.flatnonzero(test.labels == 0)[:2]
    for i in sorted(np.r_[defective, normal]):
        write_pgm(os.path.join(OUT, f"map_{i:04d}.pgm"), res.maps[i])
        write_pgm(os.path.join(OUT, f"image_{i:04d}.pgm"), np.rint(test.images[i, 0] * 255).astype(np.uint8))
        write_pgm(os.path.join(OUT, f"mask_{i:04d}.pgm"), test.masks[i] * np.uint8(255))
    print("wrote", os.path.abspath(OUT))


if __name__ == "__main__":
    main()
