import time

import numpy as np
import pytest

from scoredd import recipes as R


@pytest.fixture(scope="session")
def toy_bench():
    return R.toy_benchmark(0)


@pytest.fixture(scope="session")
def toy_net(toy_bench):
    t0 = time.process_time()
    net, trace = R.train_toy_net(toy_bench.train)
    return net, trace, time.process_time() - t0


@pytest.fixture(scope="session")
def toy_test_xy(toy_bench):
    x = np.concatenate([toy_bench.test_normal, toy_bench.test_anomalous])
    y = np.r_[np.zeros(len(toy_bench.test_normal)), np.ones(len(toy_bench.test_anomalous))].astype(int)
    return x, y


@pytest.fixture(scope="session")
def image_net():
    train_set = R.image_split("train", 500)
    t0 = time.process_time()
    net, trace = R.train_image_net(train_set.images)
    return net, trace, time.process_time() - t0
