import os
import time

os.environ.setdefault("MOTIONENERGY_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from motionenergy import data, network, training  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Small model trained on synthetic translations (speeds <= 3 px, 12 orientations).
# Shared by the slow end-to-end tests; takes about five minutes on one core.
SMALL_NET = dict(frames=3, size=9, kernels=2, orientations=12, speeds=8, num_scales=5)
SMALL_TRAIN = dict(
    patch=48,
    batch=8,
    steps_per_epoch=20,
    max_epochs_classification=40,
    max_epochs_regression=15,
    loss_margin=4,
    eval_margin=12,
    seed=0,
)
EVAL_MARGIN = 12


@pytest.fixture(scope="session")
def trained_small():
    """``(net, report, heldout, seconds)`` after the full two-phase schedule."""
    start = time.perf_counter()
    train_set = data.random_translation_set(64, 64, 64, 3.0, seed=1)
    heldout = data.random_translation_set(4, 64, 64, 3.0, seed=99)
    cfg = network.NetworkConfig(**SMALL_NET)
    trainer = training.Trainer(cfg, training.TrainConfig(**SMALL_TRAIN), train_set, heldout)
    net, report = trainer.train()
    return net, report, heldout, time.perf_counter() - start
