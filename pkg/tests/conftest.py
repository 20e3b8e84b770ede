import numpy as np
import pytest

from facepaste.oracle import FaceSet, SimulatedOracle
from facepaste.paste_attack import MaskBank


@pytest.fixture(scope="session")
def toy_faces():
    return FaceSet.toy(0)


@pytest.fixture(scope="session")
def sim_oracle(toy_faces):
    return SimulatedOracle(toy_faces)


@pytest.fixture(scope="session")
def mask_bank(toy_faces):
    return MaskBank(toy_faces)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
