import time

import numpy as np
import pytest

from tsdf_dse.dataflow import Trajectory, default_scene, generate_synthetic


@pytest.fixture(scope="session")
def room30():
    """30-frame orbit of the default room with its ground truth."""
    return generate_synthetic(default_scene(), Trajectory(frame_count=30))


@pytest.fixture(scope="session")
def room90():
    return generate_synthetic(default_scene(), Trajectory(frame_count=90))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sweep_dir(tmp_path_factory):
    """A 90-frame orbit generated and swept through the command line, once per session."""
    from tsdf_dse.cli import main

    root = tmp_path_factory.mktemp("sweep")
    seq, out = root / "seq", root / "out"
    assert main(["gen", "--out", str(seq), "--frames", "90", "--seed", "0"]) == 0
    t0 = time.perf_counter()
    assert main(["sweep", "--seq", str(seq), "--gt", str(seq / "gt.xyz"), "--out", str(out)]) == 0
    (root / "sweep_seconds").write_text(repr(time.perf_counter() - t0))
    return root
