import numpy as np
import pytest

from fslam.datasets import TrajectorySpec, synth_scene


@pytest.fixture(scope="session")
def small_scene():
    """Shared 8-frame room at 80x60; tests must not mutate it."""
    sc = synth_scene(7, n_gaussians=900, n_classes=4,
                     traj=TrajectorySpec(frames=8), width=80, height=60)
    for fr, pose in zip(sc.frames, sc.gt_poses):
        fr.pose = pose
    return sc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
