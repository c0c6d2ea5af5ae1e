import time
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, settings

from acdl.data import make_synthetic_dataset

settings.register_profile("acdl", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("acdl")

_CRITERIA = []


class CriterionRecord:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []
        self.passed = False
        self.elapsed = 0.0

    def note(self, text):
        self.details.append(text)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = "; ".join(self.details)
        return f"criterion {self.number} [{status}] {self.title} ({self.elapsed:.1f}s)" + (f": {extra}" if extra else "")


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec:`` records a pass/fail line for the summary."""

    @contextmanager
    def run(number, title):
        rec = CriterionRecord(number, title)
        t0 = time.perf_counter()
        try:
            yield rec
            rec.passed = True
        finally:
            rec.elapsed = time.perf_counter() - t0
            _CRITERIA.append(rec)
            print(rec.line())

    return run


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(_CRITERIA, key=lambda r: r.number):
        terminalreporter.write_line(rec.line())


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    """64 images per class per split, 64x64."""
    root = tmp_path_factory.mktemp("synth64") / "data"
    make_synthetic_dataset(root, seed=0, n_per_class=64, size=64)
    return root


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """8 images per class per split, 32x32."""
    root = tmp_path_factory.mktemp("synth_small") / "data"
    make_synthetic_dataset(root, seed=1, n_per_class=8, size=32)
    return root
