"""End-to-end pipeline: register -> mesh -> features -> scene.

Each stage is idempotent and resumable: it is skipped when its stamp file is
newer than every input and its primary outputs still exist, unless forced.
All artifacts live under the sample root, which doubles as the scene bundle
root once the scene stage has run.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from . import meshing, scene
from .registration import RegistrationParams, register_stack, save_registered
from .stack import SectionStack, load_stack, z_spacing_px

__all__ = ["PipelineConfig", "ConfigError", "StageError", "run_pipeline", "STAGES"]

log = logging.getLogger(__name__)

STAGES = ("register", "mesh", "features", "scene")


class ConfigError(ValueError):
    """Invalid pipeline configuration; message lists field-level problems."""


class StageError(RuntimeError):
    """A stage failed; partial outputs are retained for inspection."""


@dataclass(frozen=True)
class MeshConfig:
    fraction: float = 0.05
    smoothing: int = 20
    target_height: float = 1.0
    rotation_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    rotation_angle_deg: float = 0.0
    tumor_fraction: float = 0.2


@dataclass(frozen=True)
class FeatureConfig:
    organ_patch: int = 400
    tumor_patch: int = 100
    min_tissue_fraction: float = 0.25


@dataclass(frozen=True)
class PipelineConfig:
    root: Path
    sample_id: str
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    @classmethod
    def from_json(cls, path: Path | str) -> "PipelineConfig":
        path = Path(path)
        problems: list[str] = []
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")

        root = raw.get("root")
        if not root:
            problems.append("root: required (stack directory)")
        else:
            root = Path(root)
            if not root.is_absolute():
                root = (path.parent / root).resolve()
            if not (root / "stack.json").exists():
                problems.append(f"root: no stack.json under {root}")
        sample_id = raw.get("sample_id")
        if not sample_id:
            problems.append("sample_id: required")

        def build(section: str, factory, current):
            data = raw.get(section, {})
            if not isinstance(data, dict):
                problems.append(f"{section}: must be an object")
                return current
            try:
                return factory(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})
            except (TypeError, ValueError) as e:
                problems.append(f"{section}: {e}")
                return current

        reg = build("registration", RegistrationParams, RegistrationParams())
        mesh = build("mesh", MeshConfig, MeshConfig())
        features = build("features", FeatureConfig, FeatureConfig())
        if problems:
            raise ConfigError("; ".join(problems))
        return cls(
            root=root, sample_id=str(sample_id), registration=reg, mesh=mesh, features=features
        )


def _stamp_path(root: Path, stage: str) -> Path:
    return root / f".stage_{stage}.json"


def _write_stamp(root: Path, stage: str, seconds: float) -> None:
    with open(_stamp_path(root, stage), "w") as fh:
        json.dump({"stage": stage, "wall_seconds": seconds}, fh)
        fh.write("\n")


def _mtime(path: Path) -> float:
    return path.stat().st_mtime


def _newest_input(paths: list[Path]) -> float:
    times = [_mtime(p) for p in paths if p.exists()]
    return max(times) if times else 0.0


def _load_registered(cfg: PipelineConfig) -> SectionStack:
    reg_root = cfg.root / "registered"
    if not (reg_root / "stack.json").exists():
        raise StageError("registration outputs missing; run the register stage first")
    stack = load_stack(reg_root)
    stack.registered = True
    return stack


# --- stage bodies -----------------------------------------------------------


def _stage_register(cfg: PipelineConfig) -> None:
    stack = load_stack(cfg.root)
    result = register_stack(stack, cfg.registration)
    save_registered(result, cfg.root)


def _tumor_mask_report(
    stack: SectionStack, tumor_id: str, fraction: float
) -> meshing.GeometryReport:
    """Bbox of a tumor's mask foreground in organ volume (mask-space) coords."""
    spacing = z_spacing_px(stack.metadata, fraction)
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for i, m in enumerate(stack.tumor_mask_by_section(tumor_id)):
        if m is None or not m.any():
            continue
        ys, xs = np.nonzero(m)
        xm = (xs + 0.5) * fraction - 0.5
        ym = (ys + 0.5) * fraction - 0.5
        z = i * spacing
        lo = np.minimum(lo, [xm.min(), ym.min(), z])
        hi = np.maximum(hi, [xm.max(), ym.max(), z])
    if not np.all(np.isfinite(lo)):
        raise StageError(f"tumor {tumor_id!r} has no mask foreground")
    return meshing.GeometryReport(
        bbox_min=lo,
        bbox_max=hi,
        extents=hi - lo,
        center=(lo + hi) / 2.0,
        vertex_count=0,
        triangle_count=0,
    )


def _stage_mesh(cfg: PipelineConfig) -> None:
    stack = _load_registered(cfg)
    mc = cfg.mesh
    models = cfg.root / "models"
    models.mkdir(parents=True, exist_ok=True)

    organ_mask_mesh = meshing.reconstruct_surface(stack, mc.fraction, mc.smoothing)
    organ_mask_report = meshing.measure_geometry(organ_mask_mesh)
    rotation = (
        meshing.rotation_matrix(np.asarray(mc.rotation_axis), mc.rotation_angle_deg)
        if mc.rotation_angle_deg
        else None
    )
    organ_model, organ_model_report = meshing.normalize_model(
        organ_mask_mesh, mc.target_height, rotation
    )
    meshing.write_stl(organ_model, models / "organ.stl")

    reports = {
        "organ_mask_space": organ_mask_report,
        "organ_model_space": organ_model_report,
    }
    for tid in stack.tumor_ids:
        masks = stack.tumor_mask_by_section(tid)
        tumor_mesh = meshing.build_tumor_mesh(masks, mc.tumor_fraction, mc.smoothing)
        tumor_mask_report = _tumor_mask_report(stack, tid, mc.fraction)
        aligned = meshing.align_tumor(
            tumor_mesh, tumor_mask_report, organ_mask_report, organ_model_report
        )
        meshing.write_stl(aligned, models / f"tumor_{tid}.stl")
        reports[f"tumor_{tid}_mask_space"] = tumor_mask_report
        reports[f"tumor_{tid}_model_space"] = meshing.measure_geometry(aligned)
    meshing.write_geometry_reports(reports, models / "geometry.json")


def _position_mapper(cfg: PipelineConfig, stack: SectionStack) -> feat.PositionMapper:
    reports = meshing.read_geometry_reports(cfg.root / "models" / "geometry.json")
    s_axis, offset = meshing.mask_to_model_similarity(
        reports["organ_mask_space"], reports["organ_model_space"]
    )
    return feat.PositionMapper(
        fraction=cfg.mesh.fraction,
        z_spacing=z_spacing_px(stack.metadata, cfg.mesh.fraction),
        scale_axis=s_axis,
        offset=offset,
    )


def _organ_grids(
    cfg: PipelineConfig, stack: SectionStack
) -> list[tuple[feat.PatchGrid, list[tuple[int, int, int]]]]:
    fc = cfg.features
    return [
        feat.tile_patches(s, fc.organ_patch, fc.min_tissue_fraction)
        for s in stack.sections
    ]


def _tumor_grids(
    cfg: PipelineConfig, stack: SectionStack, tumor_id: str
) -> list[tuple[feat.PatchGrid, list[tuple[int, int, int]]]]:
    """100-px grids over the tumor's common crop rect, coverage by tumor mask."""
    fc = cfg.features
    patch_set = scene.crop_tumor_patches(stack, tumor_id)
    y0, x0, y1, x1 = patch_set.crop_rect
    ph = fc.tumor_patch
    rows, cols = (y1 - y0) // ph, (x1 - x0) // ph
    if rows == 0 or cols == 0:
        return []
    out = []
    masks = stack.tumor_mask_by_section(tumor_id)
    for slot, (si, _) in enumerate(patch_set.sections):
        grid = feat.PatchGrid(
            patch_size=ph,
            rows=rows,
            cols=cols,
            section_index=si,
            origin=(y0, x0),
            section_slot=slot,
        )
        m = masks[si]
        cells = []
        for r in range(rows):
            for c in range(cols):
                yy, xx = grid.cell_origin(r, c)
                if m is None:
                    continue
                cov = np.count_nonzero(m[yy : yy + ph, xx : xx + ph]) / (ph * ph)
                if cov >= fc.min_tissue_fraction:
                    cells.append((grid.index_of(r, c), r, c))
        out.append((grid, cells))
    return out


def _compute_tables(
    stack: SectionStack,
    grids: list[tuple[feat.PatchGrid, list[tuple[int, int, int]]]],
) -> list[feat.FeatureTable]:
    tables: dict[str, feat.FeatureTable] = {}
    for grid, cells in grids:
        section = stack.sections[grid.section_index]
        img = section.image
        if img is None:
            img = np.dstack([section.tissue_mask.astype(np.uint8) * 255] * 3)
        for index, r, c in cells:
            yy, xx = grid.cell_origin(r, c)
            patch = img[yy : yy + grid.patch_size, xx : xx + grid.patch_size]
            cy, cx = grid.cell_center(r, c)
            for name, value in feat.all_feature_values(patch).items():
                table = tables.setdefault(name, feat.FeatureTable(feature_name=name))
                table.instances.append(
                    feat.FeatureInstance(
                        index=index,
                        section=grid.section_index,
                        center_xy=(cx, cy),
                        value=value,
                    )
                )
    return [tables[name] for name in sorted(tables)]


def _stage_features(cfg: PipelineConfig) -> None:
    stack = _load_registered(cfg)
    mapper = _position_mapper(cfg, stack)
    reports = meshing.read_geometry_reports(cfg.root / "models" / "geometry.json")
    model_report = reports["organ_model_space"]
    tumor_masks = {tid: stack.tumor_mask_by_section(tid) for tid in stack.tumor_ids}

    organ_tables = _compute_tables(stack, _organ_grids(cfg, stack))
    if not organ_tables:
        raise StageError("no organ-level patches were emitted")
    organ_tables = feat.normalize_and_index(organ_tables, model_report, mapper, tumor_masks)
    for table in organ_tables:
        feat.write_feature_csv(
            table, cfg.root / "features" / "organ" / f"{table.feature_name}.csv"
        )

    for tid in stack.tumor_ids:
        grids = _tumor_grids(cfg, stack, tid)
        tables = _compute_tables(stack, grids)
        if not tables:
            log.warning("tumor %s: no feature patches at tumor level", tid)
            continue
        tables = feat.normalize_and_index(tables, model_report, mapper, tumor_masks)
        for table in tables:
            feat.write_feature_csv(
                table, cfg.root / "features" / "tumor" / tid / f"{table.feature_name}.csv"
            )


def _stage_scene(cfg: PipelineConfig) -> None:
    stack = _load_registered(cfg)
    mapper = _position_mapper(cfg, stack)

    scene.export_feature_patch_images(
        stack, _organ_grids(cfg, stack), cfg.root / "patches" / "organ"
    )

    tumor_entries = []
    for tid in stack.tumor_ids:
        patch_set = scene.crop_tumor_patches(stack, tid)
        tdir = cfg.root / "patches" / "tumor" / tid
        tdir.mkdir(parents=True, exist_ok=True)
        from PIL import Image

        section_refs = []
        y0, x0, y1, x1 = patch_set.crop_rect
        corners = [mapper.map(x0, y0, 0), mapper.map(x1, y1, 0)]
        for si, rgba in patch_set.sections:
            name = f"section_{si}.png"
            Image.fromarray(rgba, "RGBA").save(tdir / name)
            z_model = float(mapper.map((x0 + x1) / 2.0, (y0 + y1) / 2.0, si)[2])
            section_refs.append(
                {"image": f"patches/tumor/{tid}/{name}", "section": si, "z": z_model}
            )
        scene.export_feature_patch_images(stack, _tumor_grids(cfg, stack, tid), tdir)
        tumor_entries.append(
            {
                "id": tid,
                "mesh": f"models/tumor_{tid}.stl",
                "patch_dir": f"patches/tumor/{tid}",
                "plane_bounds": {
                    "x_min": float(min(corners[0][0], corners[1][0])),
                    "x_max": float(max(corners[0][0], corners[1][0])),
                    "y_min": float(min(corners[0][1], corners[1][1])),
                    "y_max": float(max(corners[0][1], corners[1][1])),
                },
                "sections": section_refs,
            }
        )

    tables = scene.build_colormap_table()
    scene.write_colormap_csv(tables, cfg.root / "colormaps.csv")

    organ_csvs = sorted(
        str(p.relative_to(cfg.root)) for p in (cfg.root / "features" / "organ").glob("*.csv")
    )
    tumor_csvs = {
        tid: sorted(
            str(p.relative_to(cfg.root))
            for p in (cfg.root / "features" / "tumor" / tid).glob("*.csv")
        )
        for tid in stack.tumor_ids
        if (cfg.root / "features" / "tumor" / tid).is_dir()
    }
    manifest = {
        "sample_id": cfg.sample_id,
        "organ": {
            "mesh": "models/organ.stl",
            "target_height": cfg.mesh.target_height,
            "rotation_axis": list(cfg.mesh.rotation_axis),
            "rotation_angle_deg": cfg.mesh.rotation_angle_deg,
            "geometry": "models/geometry.json",
        },
        "tumors": tumor_entries,
        "features": {"organ": organ_csvs, "tumor": tumor_csvs},
        "colormaps": "colormaps.csv",
    }
    scene.write_bundle(cfg.root, manifest)


# --- orchestration ----------------------------------------------------------

_STAGE_BODY = {
    "register": _stage_register,
    "mesh": _stage_mesh,
    "features": _stage_features,
    "scene": _stage_scene,
}


def _stage_inputs(cfg: PipelineConfig, stage: str) -> list[Path]:
    root = cfg.root
    base = [root / "stack.json"]
    if stage == "register":
        return base
    if stage == "mesh":
        return base + [_stamp_path(root, "register"), root / "registered" / "stack.json"]
    if stage == "features":
        return base + [
            _stamp_path(root, "mesh"),
            root / "models" / "geometry.json",
        ]
    if stage == "scene":
        return base + [
            _stamp_path(root, "features"),
            _stamp_path(root, "mesh"),
        ]
    raise ValueError(f"unknown stage {stage}")


def _stage_outputs(cfg: PipelineConfig, stage: str) -> list[Path]:
    root = cfg.root
    if stage == "register":
        return [root / "registered" / "stack.json"]
    if stage == "mesh":
        return [root / "models" / "geometry.json", root / "models" / "organ.stl"]
    if stage == "features":
        return [root / "features" / "organ"]
    if stage == "scene":
        return [root / "bundle.json", root / "colormaps.csv"]
    raise ValueError(f"unknown stage {stage}")


def _should_skip(cfg: PipelineConfig, stage: str) -> bool:
    stamp = _stamp_path(cfg.root, stage)
    if not stamp.exists():
        return False
    if any(not p.exists() for p in _stage_outputs(cfg, stage)):
        return False
    return _mtime(stamp) >= _newest_input(_stage_inputs(cfg, stage))


def run_pipeline(
    cfg: PipelineConfig, stages: list[str] | None = None, force: bool = False
) -> None:
    """Run the requested stages in canonical order; raises StageError on failure."""
    requested = list(STAGES) if stages is None else stages
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages: {unknown}; valid: {list(STAGES)}")
    ordered = [s for s in STAGES if s in requested]

    for stage in ordered:
        if not force and _should_skip(cfg, stage):
            log.info("stage %-8s skipped (outputs up to date)", stage)
            continue
        t0 = time.time()
        log.info("stage %-8s started", stage)
        try:
            _STAGE_BODY[stage](cfg)
        except StageError:
            raise
        except Exception as e:
            raise StageError(f"stage {stage} failed: {e}") from e
        dt = time.time() - t0
        _write_stamp(cfg.root, stage, dt)
        log.info("stage %-8s finished in %.1fs", stage, dt)
