import numpy as np
import pytest

from growthcast.datamodel import ImageRecord
from growthcast.synthcrop import SynthConfig, generate_dataset


def make_record(path, stage, e=0.0, n=0.0, plot="p1", treatment="i+f+", split="train"):
    return ImageRecord(path, plot, stage, e, n, treatment, split)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """30 plants, 6 stages, with harvest and emergence events."""
    cfg = SynthConfig(n_plants=30, stages=6, image_size=64, harvest_prob=0.3,
                      emergence_prob=0.15, seed=7)
    return generate_dataset(cfg, tmp_path_factory.mktemp("synth"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
