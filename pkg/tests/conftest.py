from __future__ import annotations

import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

from instada.annotations import load_dataset  # noqa: E402
from instada.backends.mock import MockBackends, MockWorld, make_toy_dataset  # noqa: E402

SMALL_PROFILES = [
    {"name": "A", "width": 96, "height": 96, "guidance": 9.5, "steps": 8},
    {"name": "B", "width": 128, "height": 128, "guidance": 3.5, "steps": 8},
]


@pytest.fixture
def toy_path(tmp_path) -> Path:
    return make_toy_dataset(tmp_path / "toy", n_images=5)


@pytest.fixture
def toy(toy_path):
    return load_dataset(toy_path)


@pytest.fixture
def world() -> MockWorld:
    return MockWorld(vocabulary=("apple", "banana", "cup"))


@pytest.fixture
def mock(world) -> MockBackends:
    return MockBackends(world)


def write_config(path: Path, dataset: Path, output_root: Path, **sections) -> Path:
    data = {
        "version": 1,
        "dataset": str(dataset),
        "output_root": str(output_root),
        "mock": True,
        "tagent": {"profiles": SMALL_PROFILES},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


@pytest.fixture
def config_factory(tmp_path, toy_path):
    def make(name: str = "cfg.yaml", output: str = "out", **sections) -> Path:
        return write_config(tmp_path / name, toy_path, tmp_path / output, **sections)

    return make
