import math

import numpy as np
import pytest

from centeratt.boxes import Box3D


def random_box(rng, class_id=None, spread=10.0):
    return Box3D(
        cx=rng.uniform(-spread, spread), cy=rng.uniform(-spread, spread),
        cz=rng.uniform(-1, 1), l=rng.uniform(0.5, 5), w=rng.uniform(0.4, 3),
        h=rng.uniform(0.5, 2.5), yaw=rng.uniform(-math.pi, math.pi),
        class_id=int(rng.integers(0, 3)) if class_id is None else class_id,
        score=rng.uniform(0, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**top):
    """Desk-sized pipeline settings that keep end-to-end tests fast."""
    from centeratt.config import PipelineConfig
    from centeratt.roi_attention import RoiConfig
    from centeratt.scene import SceneConfig
    from centeratt.tensor import AttentionConfig
    from centeratt.voxelizer import VoxelConfig

    return PipelineConfig(
        voxel=VoxelConfig(x_range=(-12.8, 12.8), y_range=(-12.8, 12.8)),
        scene=SceneConfig(num_objects=(2, 2, 2), points_per_object=60, background_points=300,
                          x_range=(-11.0, 11.0), y_range=(-11.0, 11.0)),
        roi=RoiConfig(mlp_dims=(32,), model_dim=16),
        attention=AttentionConfig(num_heads=4, model_dim=16, ffn_dim=32, pe_dim=16),
        **top)


def oracle_scenes(cfg, count, first_seed=0):
    from dataclasses import replace

    from centeratt.scene import generate_scene

    return [(f"scene_{i:04d}", generate_scene(replace(cfg.scene, seed=first_seed + i)))
            for i in range(count)]


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
