import numpy as np
import pytest
import torch

from phenocd import diffcore as dc
from phenocd import orchestrator as orc
from phenocd import scenegen as sg
from phenocd.config import RunConfig, load_config

dc.set_deterministic()

# The 8-pair 32x32 overfit fixture shared by the slow tests.
FIXTURE = {
    "name": "fixture",
    "scene": {"height": 32, "width": 32},
    "detector": {"height": 32, "width": 32},
    "schedule": {"epochs_stage1": 300, "epochs_stage3": 20, "batch_size": 8, "lr": 0.05, "val_period": 10},
}
FIXTURE_SEED = 1


def small_config(**overrides) -> RunConfig:
    data = {
        "scene": {"height": 32, "width": 32},
        "detector": {"height": 32, "width": 32},
        "schedule": {"epochs_stage1": 2, "epochs_stage3": 2, "lr": 0.05, "val_period": 1,
                     "clusters_per_class": 2},
    }
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.model_validate(data)


def fixture_config() -> RunConfig:
    return RunConfig.model_validate(FIXTURE)


def fixture_samples(config: RunConfig | None = None, count: int = 8):
    config = config or fixture_config()
    palette = sg.default_palette(config.scene.num_classes, config.scene.num_stages)
    return sg.generate_dataset(config.scene, palette, count, seed=FIXTURE_SEED)


def write_fixture_dataset(root, config: RunConfig | None = None, count: int = 8):
    """Fixture samples on disk; all three splits hold the full set."""
    config = config or fixture_config()
    samples = fixture_samples(config, count)
    sg.write_dataset(samples, root, sg.default_palette(config.scene.num_classes, config.scene.num_stages))
    ids = [s.sample_id for s in samples]
    sg.write_splits(root, {"train": ids, "val": ids, "test": ids})
    return samples


@pytest.fixture(scope="session")
def trained_fixture():
    """Stage-1 system trained on the overfit fixture, with its training result."""
    config = fixture_config()
    samples = fixture_samples(config)
    system = orc.build_system(config)
    logger = orc.Logger()
    result = orc.train_stage(system, config, samples, samples, stage=1,
                             epochs=config.schedule.epochs_stage1, logger=logger)
    return config, samples, system, result, logger


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def unit(*rows):
    t = torch.tensor(rows, dtype=torch.float64)
    return t / t.norm(dim=-1, keepdim=True)
