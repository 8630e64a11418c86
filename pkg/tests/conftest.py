"""Shared fixtures for the acceptance suite.

The trained models and the generated dataset are expensive (minutes each on
one core), so they are built once per session and shared by every criterion
that needs them.
"""

import numpy as np
import pytest

from srfields.field import FieldConfig
from srfields.scenes import load_dataset, make_dataset, toy_three_sphere_scene
from srfields.training import TrainConfig, train

# Desk-scale acceptance budget. The architecture is configured down from the
# library defaults (width 128, l_pos 10) to fit a single-core CPU; sample
# counts and batch size shrink accordingly. Both training modes share every
# hyperparameter; vanilla runs s^2 as many epochs so the two see identical
# ray counts and identical optimizer step counts (see notes in the test
# module about budget matching).
ACCEPT_FIELD = FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2)
ACCEPT_SEED = 5
ACCEPT_SCALE = 2
SS_EPOCHS = 12
VANILLA_EPOCHS = SS_EPOCHS * ACCEPT_SCALE ** 2


def acceptance_train_config(epochs: int, lr_role: str = "lr") -> TrainConfig:
    return TrainConfig(
        s=ACCEPT_SCALE, batch_rays=512, epochs=epochs, n_coarse=24, n_fine=24,
        lr_start=5e-4, lr_end=5e-5, seed=ACCEPT_SEED, jitter=True,
        lr_role=lr_role, micro_chunk_pixels=512, field=ACCEPT_FIELD)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_ds")
    make_dataset(toy_three_sphere_scene(), n_views=16, hr_res=64,
                 s=ACCEPT_SCALE, seed=11, out_dir=out, n_test=8, n_val=2,
                 extra_kernels=("tent",))
    return load_dataset(out)


@pytest.fixture(scope="session")
def trained_supersample(toy_dataset):
    cfg = acceptance_train_config(SS_EPOCHS)
    params, records = train(toy_dataset, cfg, "supersample")
    return params, records, cfg


@pytest.fixture(scope="session")
def trained_vanilla(toy_dataset):
    cfg = acceptance_train_config(VANILLA_EPOCHS)
    params, records = train(toy_dataset, cfg, "vanilla")
    return params, records, cfg


@pytest.fixture(scope="session")
def trained_supersample_tent(toy_dataset):
    cfg = acceptance_train_config(SS_EPOCHS, lr_role="lr_tent")
    params, records = train(toy_dataset, cfg, "supersample")
    return params, records, cfg
