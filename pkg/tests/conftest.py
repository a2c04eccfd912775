import copy

import numpy as np
import pytest

from drlab.bench import get_backbone
from drlab.config import RunConfig


def tiny_config(**overrides) -> RunConfig:
    """A seconds-scale configuration for protocol and plumbing tests."""
    base = {
        "backbone": {"image_side": 8, "patch_side": 4, "embed_dim": 16, "heads": 2, "blocks": 3},
        "stream": {"base_classes": 4, "incremental_classes": 4, "inc_n": 2, "train_per_class": 12, "test_per_class": 6},
        "optimizer": {"epochs": 4, "batch_size": 12},
        "pretrain": {"epochs": 6, "batch_size": 12},
    }
    base.update(overrides)
    return RunConfig.model_validate(base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_backbone(tiny):
    # deep copy so tests that perturb frozen weights never touch the shared cache
    return copy.deepcopy(get_backbone(tiny))


@pytest.fixture(scope="session")
def default_backbone():
    return get_backbone(RunConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
