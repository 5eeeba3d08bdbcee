import hypothesis
import numpy as np
import pytest

from potseg import data as dataio

hypothesis.settings.register_profile(
    "potseg", deadline=None, max_examples=25, derandomize=True)
hypothesis.settings.load_profile("potseg")


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A small shared synthetic dataset on disk (8 scenes, size 64)."""
    root = tmp_path_factory.mktemp("synth") / "scenes"
    dataio.synth_generate(8, 64, 2024, root)
    return root


@pytest.fixture(scope="session")
def rgb_samples(synth_root):
    return dataio.load_dataset(synth_root, "rgb")


@pytest.fixture(scope="session")
def disparity_samples(synth_root):
    return dataio.load_dataset(synth_root, "disparity")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240816)
