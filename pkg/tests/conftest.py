import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_yaml(path, text):
    path.write_text(text)
    return path
