"""Reference setups for the 2-D mixture and the defect-texture experiments.

The detector time sets below were picked on held-out validation data
(``gen_toy`` seed 1, texture seed 2) from the candidate lists defined here;
``scripts/select_t_sets.py`` reruns that selection.
"""

from __future__ import annotations

import numpy as np

from .datakit import gen_defect_images, gen_toy
from .nets import ConvScoreNet, MlpScoreNet
from .sde import SdeSpec
from .trainer import TrainConfig, train

# -- 2-D mixture ---------------------------------------------------------------

TOY_SPEC = SdeSpec.ve(sigma_min=0.1, sigma_max=20.0, steps=101)
TOY_TRAIN = TrainConfig(batch=128, steps=20000, lr=1e-3, seed=0, log_every=0)
TOY_N_TRAIN = 10000
TOY_N_TEST = 200
# windows of five grid indices, spacing 5 or 10
TOY_CANDIDATES = tuple(tuple(range(top, top - 50, -10)) for top in range(50, 101, 10)) + tuple(
    tuple(range(top, top - 25, -5)) for top in range(40, 101, 10))
TOY_T_INDEX = (60, 55, 50, 45, 40)


def toy_benchmark(seed=0, n_train=TOY_N_TRAIN, n_test=TOY_N_TEST):
    return gen_toy(seed, n_train, n_test, spec=TOY_SPEC)


def train_toy_net(train_data, cfg: TrainConfig = TOY_TRAIN, seed=0):
    data = np.asarray(train_data, dtype=np.float64)
    net = MlpScoreNet(dim=data.shape[1], hidden=128, seed=seed, sde=TOY_SPEC, data_var=float(np.mean(data**2)))
    return train(net, TOY_SPEC, data, cfg)


# -- defect textures -----------------------------------------------------------

IMAGE_SPEC = SdeSpec.ve(sigma_min=0.01, sigma_max=10.0, steps=1000)
IMAGE_TRAIN = TrainConfig(batch=32, steps=1500, lr=2e-3, seed=0, log_every=250)
IMAGE_SIZE = 32
IMAGE_BASE = 16
IMAGE_SEEDS = {"train": 0, "test": 1, "val": 2}
IMAGE_CANDIDATES = ((100,), (150,), (200,), (250,), (300,), (400,), (300, 200, 100), (250, 200, 150, 100, 50),
                    (400, 300, 200, 100), (300, 250, 200, 150, 100))
IMAGE_T_INDEX = (400, 300, 200, 100)


def image_split(split, n):
    frac = 0.0 if split == "train" else 0.5
    return gen_defect_images(IMAGE_SEEDS[split], n, IMAGE_SIZE, IMAGE_SIZE, anomaly_fraction=frac, split=split)


def train_image_net(images, cfg: TrainConfig = IMAGE_TRAIN, seed=0):
    x = np.asarray(images, dtype=np.float64)
    net = ConvScoreNet(x.shape[-2], x.shape[-1], x.shape[-3], base=IMAGE_BASE, seed=seed, sde=IMAGE_SPEC,
                       data_var=float(np.mean(x**2)), dtype="float32")
    return train(net, IMAGE_SPEC, x, cfg)
