import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repro", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Diffuse sphere, 6 views at 16x16; fast enough for pipeline tests."""
    from anisdf.scenegen import emit_dataset

    root = tmp_path_factory.mktemp("sphere16")
    emit_dataset("sphere", 6, 16, root, seed=0, supersample=1)
    return root


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    from anisdf.trainer import load_config

    return load_config(
        None,
        {
            "dataset": str(tiny_dataset),
            "out_dir": str(tmp_path / "run"),
            "steps": 6,
            "batch_rays": 16,
            "grid.table_size": 2**10,
            "geometry.hidden_width": 16,
            "appearance.view_width": 8,
            "appearance.ref_width": 8,
            "appearance.weight_width": 8,
            "appearance.fpar_width": 8,
            "render.n_uniform": 12,
            "render.n_importance": 4,
            "render.importance_rounds": 1,
            "checkpoint_every": 3,
            "eval_split": "",
        },
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
