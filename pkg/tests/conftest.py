from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mmrl.config import RunConfig, build_run_config
from mmrl.trainer import TrainResult, train

TINY_MODEL = {
    "feature_hidden": [8],
    "lora_rank": 2,
    "embed": 8,
    "heads": 2,
    "blocks": 1,
    "ff_width": 16,
    "critic_hidden": [8],
}

TINY_TRAIN = {
    "envs": 2,
    "total_steps": 16,
    "minibatches": 2,
    "epochs": 1,
    # freshly initialised adapters are tiny, so alpha needs room to reach the target
    "alpha_cap": 1.0e6,
}

TINY_CONFIG_YAML = """\
task:
  task: dispersion
  horizon: 8
model:
  feature_hidden: [8]
  lora_rank: 2
  embed: 8
  heads: 2
  blocks: 1
  ff_width: 16
  critic_hidden: [8]
train:
  envs: 2
  total_steps: 16
  minibatches: 2
  epochs: 1
  alpha_cap: 1000000.0
"""


def tiny_run(task: str = "dispersion", horizon: int = 8, **train_overrides) -> RunConfig:
    return build_run_config(
        {
            "task": {"task": task, "horizon": horizon},
            "model": dict(TINY_MODEL),
            "train": {**TINY_TRAIN, **train_overrides},
        }
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run()


@pytest.fixture(scope="session")
def trained(tmp_path_factory: pytest.TempPathFactory) -> TrainResult:
    return train(tiny_run(), tmp_path_factory.mktemp("run"), seed=3)


@pytest.fixture(scope="session")
def checkpoint_path(trained: TrainResult) -> Path:
    return trained.checkpoint


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yml"
    path.write_text(TINY_CONFIG_YAML, encoding="utf-8")
    return path
