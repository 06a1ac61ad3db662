from dataclasses import replace

import numpy as np
import pytest

from fedretina.data_utils import Dataset, generate_synthetic
from fedretina.experiments import ExperimentConfig, default_institutions
from fedretina.model import FLATTEN, SOFTMAX, build_model, dense, head_specs, trunk_specs
from fedretina.training import TrainConfig

SMALL_IMAGE = 32


def tiny_specs(depth=1, units=16):
    """Conv trunk of `depth` blocks (width 4) plus the standard head at reduced width."""
    return trunk_specs(depth, widths=(4, 8, 8)) + head_specs(units=units)


def linear_specs(num_classes=5):
    return [FLATTEN, dense(num_classes), SOFTMAX]


def random_dataset(rng, n, shape=(4, 4, 3), name="random"):
    labels = np.arange(n) % 5
    rng.shuffle(labels)
    return Dataset(rng.random((n,) + tuple(shape)), labels, name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_small():
    """60 images, 12 per grade, 32x32."""
    return generate_synthetic([12] * 5, SMALL_IMAGE, seed=7, name="small")


@pytest.fixture
def tiny_model():
    return build_model(tiny_specs(), seed=3, input_shape=(SMALL_IMAGE, SMALL_IMAGE, 3))


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=2, batch_size=8, lr_initial=0.01, lr_halving_patience=1,
                       early_stop_patience=2, seed=5)


@pytest.fixture
def tiny_experiment(tmp_path):
    """Two 50-image institutions (the second degraded), 32 px, one conv block, two rounds."""
    institutions = tuple(replace(inst, per_class=10, local_epochs=1) for inst in default_institutions(2))
    return ExperimentConfig(
        institutions=institutions,
        seed=1,
        out_dir=str(tmp_path / "results"),
        image_size=SMALL_IMAGE,
        trunk_depth=1,
        train=TrainConfig(epochs=2, batch_size=8, lr_initial=0.01, lr_halving_patience=1,
                          early_stop_patience=2, seed=1),
        federated_lr_halving_patience=1,
        max_rounds=2,
        independent_test_size=20,
        crossval_folds=2,
        crossval_depths=(0, 1),
    ).validate()
