"""Shared fixtures: small synthetic datasets written through the real pipeline."""

from __future__ import annotations

import numpy as np
import pytest

from broadcam.synth import LayerSpec, SynthConfig, synth_dataset, write_dataset
from broadcam.tensor_io import FeatureStack


def make_stack(sample_id="s", **layers):
    """FeatureStack from keyword arrays: make_stack(layer3=arr, layer4=arr)."""
    parsed = {int(name.removeprefix("layer")): np.asarray(arr, dtype=np.float32) for name, arr in layers.items()}
    return FeatureStack(sample_id=sample_id, layers=parsed)


SMALL_CONFIG = SynthConfig(
    num_samples=24,
    num_classes=3,
    mask_hw=(16, 16),
    layers=[LayerSpec(3, 6, 8, 8, 1.0), LayerSpec(4, 6, 4, 4, 1.0)],
    relevant_per_class=2,
    noise_std=0.25,
    num_val=8,
    num_test=4,
)


@pytest.fixture(scope="session")
def small_dataset():
    """In-memory dataset: 24 samples, 3 classes, layers 3 (6x8x8) and 4 (6x4x4)."""
    return synth_dataset(SMALL_CONFIG, seed=11)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory, small_dataset):
    """The same dataset materialized on disk; returns the manifest path."""
    root = tmp_path_factory.mktemp("small_dataset")
    return write_dataset(small_dataset, root)
