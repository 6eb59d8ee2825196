import numpy as np
import pytest
import torch

from bevlab.config import GridSpec, ModelSpec, TrainConfig, WorldSpec


@pytest.fixture(autouse=True)
def _seed_everything():
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture
def tiny_world() -> WorldSpec:
    """Small world for fast generation tests (same defaults, fewer points/views)."""
    return WorldSpec(
        points_per_scene=512,
        n_views=2,
        image_hw=(16, 32),
        n_boxes_range=(1, 3),
    )


@pytest.fixture
def micro_cfg(tiny_world) -> TrainConfig:
    """Config small enough for end-to-end training smoke tests."""
    cfg = TrainConfig(
        world=tiny_world,
        grid_voxel_size=(2.0, 2.0, 1.0),
        channels=4,
        model=ModelSpec(c_img=8, n_depth_bins=6, depth_range=(0.5, 24.0), c_encoder=8,
                        n_encoder_blocks=1),
        epochs=1,
        batch_size=2,
        lr=1e-3,
        lr_decay_epoch=1,
    )
    cfg.validate()
    return cfg


@pytest.fixture
def unit_grid() -> GridSpec:
    """4x4x4 grid with 3 channels for oracle comparisons."""
    return GridSpec(origin=(-2.0, -2.0, -2.0), voxel_size=(1.0, 1.0, 1.0),
                    shape_dhw=(4, 4, 4), channels=3)


def rand_level(grid: GridSpec, scale: int, channels=None, batch=1, dtype=torch.float64, rng=None):
    rng = rng or np.random.default_rng(0)
    c = channels if channels is not None else grid.channels
    arr = rng.standard_normal((batch, c, *grid.level_shape(scale)))
    return torch.from_numpy(arr).to(dtype)
