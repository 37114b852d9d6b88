import pytest

from vitlr.synth import generate_dataset


@pytest.fixture(scope="session")
def easy_small(tmp_path_factory):
    """40 short easy clips at the tiny preset's resolution."""
    return generate_dataset(tmp_path_factory.mktemp("easy"), "easy", 40, seed=2, n_frames=4,
                            h=64, w=128)
