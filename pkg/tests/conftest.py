import numpy as np
import pytest

from tlupdate.ann import Architecture, TrainConfig, init_network, train
from tlupdate.data import Batch
from tlupdate.monitor import UpdateBuffer


def teacher_data(n=240, d=3, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, d))
    y = 0.6 * x[:, 0] ** 2 + 0.3 * x[:, 1] - 0.2 * x[:, 0] * x[:, 2] + shift * x[:, 1]
    return x, y


@pytest.fixture(scope="session")
def toy_model():
    x, y = teacher_data()
    arch = Architecture(3, (6, 5), "tanh")
    model, _ = train(init_network(arch, 1), x, y, TrainConfig(learning_rate=0.01, max_epochs=150, seed=1))
    return model


@pytest.fixture(scope="session")
def drift_buffer():
    x, y = teacher_data(n=200, seed=5, shift=0.8)
    b0 = Batch(0, 0, 100, 5.0, np.datetime64("2024-01-01T00:00:00", "s"))
    b1 = Batch(1, 100, 200, 5.0, np.datetime64("2024-01-06T00:00:00", "s"))
    return UpdateBuffer(b1, b0, x, y)


FAST_UPDATE = TrainConfig(max_epochs=80, early_stop_patience=10)
