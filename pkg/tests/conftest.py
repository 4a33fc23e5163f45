import numpy as np
import pytest

from oodkit import harness, nn, toydata


def dense_stack(in_dim=12, hidden=8, num_classes=3):
    return [nn.flatten(), nn.dense(in_dim, hidden), nn.relu(),
            nn.dense(hidden, num_classes)]


def small_images(count, seed, shape=(3, 2, 2)):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count, *shape))


@pytest.fixture(scope="session")
def trained_blob_net():
    """A conv net trained well enough that every class is predicted on its
    own training set; shared by the detector tests."""
    xx, yy = toydata.inlier_images(256, 7)
    net = nn.build_network(harness.small_conv_layers(3, 8, 4), (3, 8, 8), 4,
                           seed=7)
    cfg = nn.TrainConfig(epochs=20, batch_in=64, momentum=0.9,
                         lr_schedule=nn.LrSchedule("step-decay", 0.05,
                                                   drop_factor=1.0),
                         seed=7)
    net, a_tr = nn.train(net, xx, yy, cfg)
    assert a_tr > 0.7
    return net, xx, yy
