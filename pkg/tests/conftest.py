from pathlib import Path

import numpy as np
import pytest

from bmdgan.gan.data import DiscriminatorConfig, GeneratorConfig
from bmdgan.imaging.actions import manifest_hash
from bmdgan.imaging.store import CaseStore
from bmdgan.losses.data import LossWeights
from bmdgan.phantom.actions import downsample_spec, generate_dataset
from bmdgan.phantom.data import DatasetConfig, PhantomSpec
from bmdgan.training.actions import TrainingContext
from bmdgan.utils.settings import BMDGAN_RUN_SLOW, MANIFEST_FILENAME

TOY_CANVAS = 64


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled by BMDGAN_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if BMDGAN_RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set BMDGAN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec() -> PhantomSpec:
    return downsample_spec(PhantomSpec(), 4)


@pytest.fixture(scope="session")
def tiny_dataset_config() -> DatasetConfig:
    return DatasetConfig(n_cases=6, canvas_width=TOY_CANVAS, canvas_height=TOY_CANVAS)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_spec, tiny_dataset_config) -> Path:
    out_dir = tmp_path_factory.mktemp("tiny_dataset")
    generate_dataset(
        tiny_spec,
        n_cases=tiny_dataset_config.n_cases,
        split_fraction=0.67,
        rng_seed=7,
        out_dir=out_dir,
        dataset=tiny_dataset_config,
        workers=2,
    )
    return out_dir


@pytest.fixture
def tiny_store(tiny_dataset_dir) -> CaseStore:
    return CaseStore.from_manifest_path(tiny_dataset_dir / MANIFEST_FILENAME)


@pytest.fixture
def toy_generator_config() -> GeneratorConfig:
    return GeneratorConfig(base_channels=8, n_downsamples=2, n_res_blocks=1, norm_groups=4)


@pytest.fixture
def toy_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(base_channels=8, n_layers=3, norm_groups=4)


@pytest.fixture
def toy_context(
    tmp_path, tiny_dataset_dir, tiny_store, toy_generator_config, toy_discriminator_config
) -> TrainingContext:
    return TrainingContext(
        store=tiny_store,
        manifest_hash=manifest_hash(tiny_dataset_dir / MANIFEST_FILENAME),
        generator_config=toy_generator_config,
        discriminator_config=toy_discriminator_config,
        loss_weights=LossWeights(),
        out_dir=tmp_path / "run",
        seed=3,
    )
