from dataclasses import replace

import numpy as np
import pytest

from spectral_watermark.datagen import make_blobs, sample_queries, split
from spectral_watermark.harness import ExperimentParams, build_world
from spectral_watermark.nnet import TrainConfig, distill, train_teacher
from spectral_watermark.wmcore import WatermarkConfig

TEACHER_CFG = TrainConfig(epochs=100, batch_size=32, learning_rate=1.0)
STUDENT_CFG = TrainConfig(loss="kl", architecture="mlp", hidden_size=256,
                          optimizer="lbfgs", max_iter=500)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Desk:
    """One watermarked teacher, one plain teacher and a student of each."""

    def __init__(self, seed=0, epsilon=0.05):
        params = ExperimentParams(seed=seed, watermarked=2)
        self.world = build_world(params)
        self.key, self.other_key = self.world.keys
        self.wm = WatermarkConfig(self.key, epsilon)
        te = self.world.teacher_data
        self.teacher = train_teacher(te, replace(TEACHER_CFG, seed=seed + 1), self.wm)
        self.plain = train_teacher(te, replace(TEACHER_CFG, seed=seed + 2))
        st = self.world.student_data.unlabeled()
        self.student = distill(self.teacher, st, STUDENT_CFG)
        self.plain_student = distill(self.plain, st, STUDENT_CFG)
        self.queries = self.world.queries


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture(scope="session")
def small_blobs():
    ds = make_blobs(m=3, n=4, per_class=60, spread=0.1, seed=5)
    return ds, split(ds, (0.5, 0.5), seed=5), sample_queries(ds, 20, seed=5)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=str):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
