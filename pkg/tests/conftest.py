import os
import sys

import numpy as np
import pytest
import torch

# Add the repository root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.config import EncoderConfig
from modules.data_io import VideoSample
from modules.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_spec():
    """Four short videos, cheap enough for per-test training"""
    return SyntheticSpec(num_videos=4, K=3, T=16, dim=8, min_len=2, max_len=5,
                         max_instances=2, min_gap=1, seed=7)


@pytest.fixture
def small_dataset(small_spec):
    sequences, annotations = generate_synthetic(small_spec)
    samples = [VideoSample(s, annotations.videos[s.video_id]) for s in sequences]
    return samples, annotations


@pytest.fixture
def small_encoder():
    return EncoderConfig(scales=(1, 2), num_heads=2)


@pytest.fixture(autouse=True)
def _float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
