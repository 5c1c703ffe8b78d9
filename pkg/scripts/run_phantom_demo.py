#!/usr/bin/env python3
"""Generate a demo phantom, run the full pipeline, and print serve hints.

Usage: python scripts/run_phantom_demo.py [out_dir] [--seed N]
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from histo3d.phantom import PhantomSpec, TumorSpec, generate_phantom
from histo3d.pipeline import PipelineConfig, run_pipeline

DEMO_SPEC = PhantomSpec(
    width=640,
    height=640,
    n_sections=12,
    organ_semi_axes=(240.0, 200.0),
    organ_z_semi=9.0,
    tumors=(
        TumorSpec("1", center=(400.0, 320.0, 5.5), semi_axes=(60.0, 50.0, 2.8)),
        TumorSpec("2", center=(220.0, 260.0, 6.0), semi_axes=(40.0, 36.0, 2.4)),
    ),
    max_translation=6.0,
    max_rotation_deg=3.0,
    elastic_max=3.0,
    nucleus_count=900,
)

CONFIG = {
    "sample_id": "demo",
    "registration": {
        "scale": 1.0,
        "mesh_pitch": 80,
        "block_radius": 24,
        "search_radius": 16,
        "min_ncc": 0.5,
    },
    "mesh": {"fraction": 0.25, "tumor_fraction": 0.25},
    "features": {"organ_patch": 160, "tumor_patch": 40},
}


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", nargs="?", default="demo_out", type=Path)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname).1s %(name)s: %(message)s")
    root = args.out / "sample"
    generate_phantom(DEMO_SPEC, seed=args.seed, out_dir=root)

    cfg = dict(CONFIG)
    cfg["root"] = str(root)
    cfg_path = args.out / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=2))

    run_pipeline(PipelineConfig.from_json(cfg_path))
    print()
    print(f"bundle ready under {root}")
    print(f"serve it with:   histo3d serve --bundle {root} --port 8080")
    print("then point the viewer (frontend/) at http://localhost:8080")
    return 0


if __name__ == "__main__":
    sys.exit(main())
