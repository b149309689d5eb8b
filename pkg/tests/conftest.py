import sys

import pytest

from cowsynth.model import ArchitectureConfig
from cowsynth.phantom import PhantomConfig, generate_dataset
from cowsynth.training import SliceData

TINY_PHANTOM = PhantomConfig(shape=(4, 32, 32), seed=3, n_vessels=(2, 3), n_distractors=(1, 2))
TINY_ARCH = ArchitectureConfig(input_hw=(32, 32), base_channels=4)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_phantoms")
    manifest = generate_dataset(TINY_PHANTOM, 10, out, split_fracs=(0.6, 0.2, 0.2))
    return out, manifest


@pytest.fixture(scope="session")
def tiny_slices(tiny_dataset):
    _, manifest = tiny_dataset
    return SliceData(manifest.split("train")), SliceData(manifest.split("val"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
