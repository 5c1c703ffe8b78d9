"""Scene bundle assembly: the on-disk export the viewer consumes.

Bundle layout under one root:

    bundle.json                    manifest (see README for the schema)
    models/organ.stl               watertight meshes, binary STL
    models/tumor_<id>.stl
    models/geometry.json
    features/organ/<name>.csv
    features/tumor/<id>/<name>.csv
    patches/organ/<index>.png      RGB feature patch crops
    patches/tumor/<id>/<k>.png
    patches/tumor/<id>/section_<k>.png   RGBA tumor section planes
    colormaps.csv                  name,index,r,g,b
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .stack import SectionStack

__all__ = [
    "BundleError",
    "SceneBundle",
    "TumorPatchSet",
    "crop_tumor_patches",
    "export_feature_patch_images",
    "build_colormap_table",
    "write_colormap_csv",
    "write_bundle",
    "validate_bundle",
    "load_bundle",
]

CROP_MARGIN = 16  # px of visual context around the tumor union bbox

COLORMAP_NAMES = ("bone", "viridis", "plasma")


class BundleError(ValueError):
    """Manifest references files that do not exist or fail to parse."""


@dataclass
class TumorPatchSet:
    tumor_id: str
    crop_rect: tuple[int, int, int, int]  # y0, x0, y1, x1 (exclusive)
    sections: list[tuple[int, np.ndarray]]  # (section index, RGBA patch)


def crop_tumor_patches(stack: SectionStack, tumor_id: str) -> TumorPatchSet:
    """Equal-size RGBA crops of one tumor across its section range.

    One common crop rectangle (union bbox of the tumor's masks over all
    sections plus a margin, clamped to the raster) is applied to every
    section between the tumor's first and last occurrence; the tumor mask
    becomes the alpha channel.
    """
    per_section = stack.tumor_mask_by_section(tumor_id)
    occupied = [i for i, m in enumerate(per_section) if m is not None and m.any()]
    if not occupied:
        raise ValueError(f"tumor {tumor_id!r} absent from all sections")

    y0 = x0 = np.inf
    y1 = x1 = -np.inf
    for i in occupied:
        ys, xs = np.nonzero(per_section[i])
        y0, x0 = min(y0, ys.min()), min(x0, xs.min())
        y1, x1 = max(y1, ys.max()), max(x1, xs.max())
    h, w = stack.sections[0].shape
    rect = (
        max(int(y0) - CROP_MARGIN, 0),
        max(int(x0) - CROP_MARGIN, 0),
        min(int(y1) + 1 + CROP_MARGIN, h),
        min(int(x1) + 1 + CROP_MARGIN, w),
    )

    sections = []
    for i in range(occupied[0], occupied[-1] + 1):
        s = stack.sections[i]
        ry0, rx0, ry1, rx1 = rect
        if s.image is not None:
            rgb = s.image[ry0:ry1, rx0:rx1]
        else:
            rgb = np.full((ry1 - ry0, rx1 - rx0, 3), 255, dtype=np.uint8)
        mask = per_section[i]
        alpha = (
            (mask[ry0:ry1, rx0:rx1].astype(np.uint8) * 255)
            if mask is not None
            else np.zeros((ry1 - ry0, rx1 - rx0), dtype=np.uint8)
        )
        rgba = np.dstack([rgb.astype(np.uint8), alpha])
        sections.append((i, rgba))
    return TumorPatchSet(tumor_id=tumor_id, crop_rect=rect, sections=sections)


def export_feature_patch_images(
    stack: SectionStack,
    grids_with_cells: list[tuple["PatchGrid", list[tuple[int, int, int]]]],
    out_dir: Path | str,
) -> list[int]:
    """Write the RGB crop of every emitted patch as <index>.png.

    Returns the written indices. Encoding settings are fixed so re-export is
    byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for grid, cells in grids_with_cells:
        section = stack.sections[grid.section_index]
        img = section.image
        if img is None:
            img = np.dstack([section.tissue_mask.astype(np.uint8) * 255] * 3)
        for index, r, c in cells:
            yy, xx = grid.cell_origin(r, c)
            crop = img[yy : yy + grid.patch_size, xx : xx + grid.patch_size]
            Image.fromarray(crop.astype(np.uint8), "RGB").save(out / f"{index}.png")
            written.append(index)
    return written


def build_colormap_table(names: tuple[str, ...] = COLORMAP_NAMES) -> dict[str, np.ndarray]:
    """256-entry RGB tables pulled from matplotlib's named colormaps."""
    import matplotlib

    tables = {}
    for name in names:
        cmap = matplotlib.colormaps[name]
        rgba = cmap(np.linspace(0.0, 1.0, 256))
        tables[name] = np.round(rgba[:, :3] * 255).astype(np.uint8)
    return tables


def write_colormap_csv(tables: dict[str, np.ndarray], path: Path | str) -> None:
    lines = ["name,index,r,g,b"]
    for name in sorted(tables):
        table = tables[name]
        if table.shape != (256, 3):
            raise ValueError(f"colormap {name!r} is not 256x3")
        for i, (r, g, b) in enumerate(table):
            lines.append(f"{name},{i},{r},{g},{b}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_colormap_csv(path: Path | str) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "name,index,r,g,b":
        raise ValueError("bad colormap CSV header")
    tables: dict[str, list] = {}
    for line in lines[1:]:
        name, idx, r, g, b = line.split(",")
        tables.setdefault(name, []).append((int(idx), int(r), int(g), int(b)))
    out = {}
    for name, rows in tables.items():
        rows.sort()
        if [i for i, *_ in rows] != list(range(256)):
            raise ValueError(f"colormap {name!r} entries incomplete")
        out[name] = np.asarray([rgb for _, *rgb in rows], dtype=np.uint8)
    return out


@dataclass
class SceneBundle:
    root: Path
    manifest: dict

    @property
    def sample_id(self) -> str:
        return self.manifest["sample_id"]


def _collect_refs(manifest: dict) -> list[str]:
    refs = [manifest["organ"]["mesh"], manifest["colormaps"]]
    for t in manifest["tumors"]:
        refs.append(t["mesh"])
        for sec in t["sections"]:
            refs.append(sec["image"])
    refs.extend(manifest["features"]["organ"])
    for csvs in manifest["features"]["tumor"].values():
        refs.extend(csvs)
    return refs


def validate_bundle(root: Path | str, manifest: dict | None = None) -> None:
    """Every manifest ref must exist; every feature CSV index needs its
    patch image. Raises BundleError listing all missing files."""
    root = Path(root)
    if manifest is None:
        mpath = root / "bundle.json"
        if not mpath.exists():
            raise BundleError(f"missing manifest: {mpath}")
        with open(mpath) as fh:
            manifest = json.load(fh)

    missing = [ref for ref in _collect_refs(manifest) if not (root / ref).exists()]

    def check_patches(csv_refs: list[str], patch_dir: str) -> None:
        for ref in csv_refs:
            path = root / ref
            if not path.exists():
                continue  # already reported above
            with open(path) as fh:
                lines = fh.read().splitlines()[1:]
            for line in lines:
                idx = line.split(",", 1)[0]
                patch = root / patch_dir / f"{idx}.png"
                if not patch.exists() and str(patch.relative_to(root)) not in missing:
                    missing.append(str(patch.relative_to(root)))

    check_patches(manifest["features"]["organ"], "patches/organ")
    for tid, csvs in manifest["features"]["tumor"].items():
        check_patches(csvs, f"patches/tumor/{tid}")

    if missing:
        raise BundleError(
            "bundle has dangling refs: " + ", ".join(sorted(set(missing)))
        )


def write_bundle(root: Path | str, manifest: dict) -> SceneBundle:
    """Validate all refs, write bundle.json, and return the parsed bundle."""
    root = Path(root)
    validate_bundle(root, manifest)
    with open(root / "bundle.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(root / "bundle.json") as fh:
        parsed = json.load(fh)
    return SceneBundle(root=root, manifest=parsed)


def load_bundle(root: Path | str) -> SceneBundle:
    root = Path(root)
    validate_bundle(root)
    with open(root / "bundle.json") as fh:
        return SceneBundle(root=root, manifest=json.load(fh))
