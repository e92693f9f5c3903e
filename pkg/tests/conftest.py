import pytest

from vqlab.core import load_dataset
from vqlab.synthgen import SceneSpec, generate


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A tiny deterministic dataset shared by module tests."""
    root = tmp_path_factory.mktemp("small_ds") / "ds"
    spec = SceneSpec(seed=7, num_videos=4, frames_per_video=16, resolution=(64, 64))
    generate(spec, root)
    return root, load_dataset(root)


@pytest.fixture(scope="session")
def benchmark_dataset(tmp_path_factory):
    """The 200-video synthetic benchmark used by the acceptance suite."""
    root = tmp_path_factory.mktemp("bench_ds") / "ds"
    spec = SceneSpec(seed=123, num_videos=200, frames_per_video=24, resolution=(64, 64))
    generate(spec, root)
    return root, load_dataset(root)


@pytest.fixture(scope="session")
def benchmark_test_dataset(tmp_path_factory):
    """Held-out test split for the acceptance suite (disjoint seed)."""
    root = tmp_path_factory.mktemp("bench_test_ds") / "ds"
    spec = SceneSpec(seed=456, num_videos=50, frames_per_video=24, resolution=(64, 64))
    generate(spec, root)
    return root, load_dataset(root)
