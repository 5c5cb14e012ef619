import pytest

from dagcd.detector import TrainConfig, train
from dagcd.toy import synth_attention_dataset


@pytest.fixture(scope="session")
def family_a_train():
    return synth_attention_dataset(100, "A", seed=0)


@pytest.fixture(scope="session")
def family_a_eval():
    return synth_attention_dataset(100, "A", seed=1)


@pytest.fixture(scope="session")
def family_b_eval():
    return synth_attention_dataset(100, "B", seed=2)


@pytest.fixture(scope="session")
def detector(family_a_train):
    return train(family_a_train, TrainConfig(seed=0))
