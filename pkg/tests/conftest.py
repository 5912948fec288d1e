from __future__ import annotations

import time

import pytest

from resistsim.cli.synth import synth_dataset


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """The seeded 64-tile, 128 x 128 px, 7 nm dataset with 1 nm ground truth."""
    t0 = time.perf_counter()
    man = synth_dataset(tmp_path_factory.mktemp("synthetic"), seed=0, count=64, tile_px=128, pitch_nm=7.0)
    man.build_seconds = time.perf_counter() - t0
    return man
