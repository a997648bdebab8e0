"""Shared fixtures: one small synthetic dataset reused across test modules."""

import pytest

from emofuse.corpus import generate_synthetic_fixture
from emofuse.dataset import balance_and_split, build_manifest
from emofuse.signal import SegmentSpec


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "fix4"
    generate_synthetic_fixture(root, n_per_class=6, num_classes=4, seed=11)
    return root


@pytest.fixture(scope="session")
def manifest(fixture_root):
    return build_manifest(fixture_root, SegmentSpec(False, True),
                          mode="audio+video")


@pytest.fixture(scope="session")
def balanced(manifest):
    return balance_and_split(manifest, per_class_total=10, train_fraction=0.8,
                             seed=0)
