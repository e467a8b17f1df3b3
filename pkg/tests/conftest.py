from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssodr.core import Box, Dataset, FrameRecord, RegionRecord
from ssodr.synth import SynthConfig, generate

settings.register_profile("ssodr", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ssodr")


def tiny_dataset(dim: int = 4) -> Dataset:
    """Two frames (one positive, one negative) and three regions."""
    frames = [FrameRecord("a", "v0", 1), FrameRecord("b", "v1", 0)]
    rng = np.random.default_rng(7)
    regions = [
        RegionRecord(10, "a", Box(0, 0, 10, 10), rng.standard_normal(dim).astype(np.float32), 1),
        RegionRecord(11, "a", Box(2, 3, 12.5, 9), rng.standard_normal(dim).astype(np.float32), 1),
        RegionRecord(12, "b", Box(1, 1, 4, 4), rng.standard_normal(dim).astype(np.float32), 0),
    ]
    return Dataset.from_records("cup", dim, frames, regions, n_per_frame=2)


SMALL = SynthConfig(n_videos=8, frames_per_video=10, regions_per_frame=24, dim=16, seed=3)


@pytest.fixture(scope="session")
def default_synth():
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL)
