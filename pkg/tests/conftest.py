import numpy as np
import pytest

from diffmine.core import DenoiserBackend, ImageRecord, LabelSet, NoiseSchedule


class ConstantBackend(DenoiserBackend):
    """Predicts a fixed value everywhere."""

    identifier = "test:constant"

    def __init__(self, value=0.0, cond_dim=16):
        self.value = value
        self.cond_dim = cond_dim

    def predict(self, noised, t, cond):
        return np.full_like(np.asarray(noised, dtype=np.float64), self.value)


class PromptGainBackend(DenoiserBackend):
    """Cheap conditioning-dependent backend that does not need the clean image."""

    identifier = "test:prompt-gain"
    concurrent_safe = True

    def __init__(self, cond_dim=16):
        self.cond_dim = cond_dim

    def predict_batch(self, noised, t, cond):
        g = 0.5 + 0.25 * cond.embedding[0]
        return g * np.tanh(noised) + 0.05 * np.asarray(t)[:, None, None, None]

    def predict(self, noised, t, cond):
        return self.predict_batch(np.asarray(noised)[None], np.array([t]), cond)[0]


@pytest.fixture
def sched():
    return NoiseSchedule()


@pytest.fixture
def two_labels():
    return LabelSet(("a", "b"), "an image of {}", "an image")


def random_record(rng, i=0, size=16, channels=1, label="a", split="train"):
    return ImageRecord(f"img{i:04d}", rng.uniform(0, 1, (size, size, channels)), label, split)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record a PASS/FAIL line for the acceptance summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
