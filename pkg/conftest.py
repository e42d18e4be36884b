"""Shared pytest fixtures for the experiment runner."""

import numpy as np
import pytest

from gppbed.forward import EvalCounter
from gppbed.statcore import Gaussian, RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def counter():
    return EvalCounter()


@pytest.fixture
def standard_prior():
    return Gaussian(np.zeros(1), np.eye(1))
