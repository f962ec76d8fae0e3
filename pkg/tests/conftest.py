import warnings

import numpy as np
import pytest
import torch

from decon.config import ExperimentConfig

# micro instantiation used for finite-difference checks
MICRO_WIDTHS = (2, 3, 4, 5)
MICRO_DEC_WIDTH = 3


def micro_config(**overrides) -> ExperimentConfig:
    base = dict(proj_hidden=4, proj_out=3, prototypes_enc=4, prototypes_dec=4, image_size=32,
                batch_size=2, epochs=1, lr=0.05, weight_decay=0.0, seed=3)
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
