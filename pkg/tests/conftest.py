import numpy as np
import pytest

from semux.channel import ChannelModel
from semux.data import synthetic
from semux.model import SemanticMux
from semux.modem import OfdmConfig
from semux.nets import ArchConfig
from semux.pipeline import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Matches ``selftest.TINY_ARCH``: 3 classes of 4x4 images."""
    return synthetic(n_classes=3, size=4, n_train=64, n_test=48, seed=0)


@pytest.fixture(scope="session")
def trained():
    """Two tasks over a 2x2 link with 64 used subcarriers, trained once for the session."""
    ds = synthetic(seed=0)
    model = SemanticMux(ArchConfig(n_comp=2, k_used=64), np.random.default_rng(0), ofdm=OfdmConfig(1024, 64))
    cm = ChannelModel()
    rows = train(ds, model, cm, TrainConfig(epochs=4, steps_per_epoch=100, eval_items=512))
    return ds, model, cm, rows


@pytest.fixture(scope="session")
def fixed_channel_trained():
    """Two tasks trained on one channel realization, the setting of a deployed model whose channel then moves."""
    from semux.channel import sample_realization

    ds = synthetic(seed=0)
    cm = ChannelModel()
    home = sample_realization(cm, np.random.default_rng(77))
    model = SemanticMux(ArchConfig(n_comp=2, k_used=64, precoder_init="identity"), np.random.default_rng(0),
                        ofdm=OfdmConfig(1024, 64))
    train(ds, model, cm, TrainConfig(epochs=4, steps_per_epoch=100, eval_items=128, channel_refresh="fixed"),
          realization=home)
    return ds, model, cm, home
