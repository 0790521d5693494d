import pytest

from aem.simulator import SimConfig, generate_dataset

TINY = dict(num_actions=3, feature_dim=16, min_len=3, max_len=6, max_objects=3,
            descriptions_per_action=2, train_videos=6, val_videos=2, test_videos=8)


@pytest.fixture(scope="session")
def tiny_config():
    return SimConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return generate_dataset(tiny_config, 7)
