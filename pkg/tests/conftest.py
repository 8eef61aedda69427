"""Shared toy trainings. Each full run takes a few CPU minutes, so they are cached per session."""
import time

import pytest

from keygrid import trainer as tr

TOY_SEED = 0


class ToyRun:
    def __init__(self, config, images):
        self.config = config
        self.initial_eval = tr.evaluate(tr.init_checkpoint(config), images)
        start = time.perf_counter()
        self.result = tr.train(config, images)
        self.seconds = time.perf_counter() - start
        self.checkpoint = self.result.checkpoint
        self.final_eval = tr.evaluate(self.checkpoint, images)


@pytest.fixture(scope="session")
def toy_images():
    cfg = tr.TrainConfig(seed=TOY_SEED)
    return tr.synthetic_images(cfg.n_images, cfg.image_size, cfg.channels, seed=TOY_SEED)


@pytest.fixture(scope="session")
def toy_run(toy_images):
    return ToyRun(tr.TrainConfig(seed=TOY_SEED), toy_images)


@pytest.fixture(scope="session")
def toy_run_repeat(toy_images):
    return ToyRun(tr.TrainConfig(seed=TOY_SEED), toy_images)


@pytest.fixture(scope="session")
def noiseless_run(toy_images):
    return ToyRun(tr.TrainConfig(seed=TOY_SEED, noise=False), toy_images)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
