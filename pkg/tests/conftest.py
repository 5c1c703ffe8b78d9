import json
import shutil
from pathlib import Path

import pytest

from histo3d.phantom import PhantomSpec, TumorSpec, generate_phantom
from histo3d.pipeline import PipelineConfig, run_pipeline


SMALL_SPEC = PhantomSpec(
    width=640,
    height=640,
    n_sections=10,
    organ_semi_axes=(240.0, 200.0),
    organ_z_semi=8.0,
    tumors=(
        # centers on integer pixels / half-integer z so mask bboxes stay
        # symmetric and the alignment oracle is exact
        TumorSpec("1", center=(400.0, 320.0, 4.5), semi_axes=(60.0, 50.0, 2.6)),
        TumorSpec("2", center=(220.0, 260.0, 5.0), semi_axes=(40.0, 36.0, 2.2)),
    ),
    max_translation=0.0,
    max_rotation_deg=0.0,
    elastic_max=0.0,
    nucleus_count=900,
    landmark_grid_step=80,
)

SMALL_CONFIG = {
    "sample_id": "small-phantom",
    "registration": {
        "scale": 1.0,
        "mesh_pitch": 80,
        "block_radius": 24,
        "search_radius": 12,
        "min_ncc": 0.5,
    },
    "mesh": {"fraction": 0.25, "tumor_fraction": 0.25},
    "features": {"organ_patch": 160, "tumor_patch": 40},
}


@pytest.fixture(scope="session")
def small_phantom_dir(tmp_path_factory) -> Path:
    """Zero-jitter 10-section phantom with two tumors (seed 42)."""
    root = tmp_path_factory.mktemp("phantom") / "small"
    generate_phantom(SMALL_SPEC, seed=42, out_dir=root)
    return root


def write_config(root: Path, stack_dir: Path) -> Path:
    cfg = dict(SMALL_CONFIG)
    cfg["root"] = str(stack_dir)
    path = root / "config.json"
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2)
    return path


@pytest.fixture(scope="session")
def small_bundle_dir(small_phantom_dir, tmp_path_factory) -> Path:
    """The small phantom run through all four stages; root is a valid bundle."""
    work = tmp_path_factory.mktemp("bundle") / "sample"
    shutil.copytree(small_phantom_dir, work)
    cfg_path = write_config(work.parent, work)
    cfg = PipelineConfig.from_json(cfg_path)
    run_pipeline(cfg)
    return work
