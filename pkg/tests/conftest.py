import pytest

from harness.experiment_config import from_dict

TINY = {
    "model": {
        "total_stride": 4, "encoder_channels": 3, "feature_channels": 4, "context_channels": 3,
        "hidden_channels": 3, "motion_channels": 3, "flow_head_channels": 3, "attention_channels": 2,
        "corr_levels": 2, "corr_radius": 1,
    },
    "forward_solver": {"max_iters": 8},
    "data": {"image_size": 16, "max_disp": 1.5, "batch_size": 1, "eval_samples": 2, "frames": 2},
    "run": {"steps": 2, "eval_every": 1, "log_every": 1},
    "ablation": {"freq_list": [0, 1], "budget": 6, "jr_weights": [0.1]},
    "reuse": {"n_streams": 2, "frames": 3},
    "correlation": {"n_samples": 4, "max_disps": [0.5, 1.5]},
    "bench": {"dim": 8, "trials": 2, "max_iters": 300, "spectral_radii": [0.0, 0.5]},
}


@pytest.fixture
def tiny_raw():
    """A desk-top config small enough for a training step to take milliseconds."""
    return {section: dict(values) for section, values in TINY.items()}


@pytest.fixture
def tiny_config(tiny_raw):
    return from_dict(tiny_raw)
