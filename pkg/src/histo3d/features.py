"""Patch-level quantitative features over registered sections.

Sections are tiled into non-overlapping patches (400 px at the organ level,
100 px at the tumor level); each patch yields a set of named scalar features
(HOG orientation energies, uniform LBP histogram, GLCM energy, nuclei
statistics, intensity statistics). Tables are normalized per sample,
percentile-ranked with the mid-rank convention, positioned in model space,
and tagged with the tumor the patch center falls inside, if any.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata
from skimage.color import rgb2hed
from skimage.filters import threshold_otsu

from .meshing import GeometryReport

__all__ = [
    "PatchGrid",
    "FeatureInstance",
    "FeatureTable",
    "PositionMapper",
    "FEATURE_KINDS",
    "tile_patches",
    "feature_vector",
    "normalize_and_index",
    "percentile_threshold",
    "write_feature_csv",
    "read_feature_csv",
]

log = logging.getLogger(__name__)

FEATURE_KINDS = ("hog", "lbp", "glcm_energy", "nuclei", "intensity")

HOG_BINS = 9
HOG_CELL = 9  # orientation histograms pooled over 9 px windows
LBP_BINS = 59  # 58 uniform 8-bit patterns + 1 catch-all
GLCM_LEVELS = 32
NUCLEI_AREA_RANGE = (50, 5000)  # px^2


def grayscale(patch: np.ndarray) -> np.ndarray:
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 2:
        return p
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


@dataclass(frozen=True)
class PatchGrid:
    """Row-major non-overlapping tiling of one section (stride = patch size).

    Patch indices are a pure function of (section, row, col): every grid cell
    consumes an index whether or not the patch is emitted, so the same cell
    gets the same index for every feature type.
    """

    patch_size: int
    rows: int
    cols: int
    section_index: int
    origin: tuple[int, int] = (0, 0)  # (y, x) of cell (0, 0)
    section_slot: int | None = None  # base multiplier; defaults to section_index

    @property
    def stride(self) -> int:
        return self.patch_size

    def index_of(self, row: int, col: int) -> int:
        slot = self.section_index if self.section_slot is None else self.section_slot
        return slot * self.rows * self.cols + row * self.cols + col

    def cell_origin(self, row: int, col: int) -> tuple[int, int]:
        return (
            self.origin[0] + row * self.patch_size,
            self.origin[1] + col * self.patch_size,
        )

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        y0, x0 = self.cell_origin(row, col)
        half = (self.patch_size - 1) / 2.0
        return (y0 + half, x0 + half)


def _tile_mask(
    mask: np.ndarray, patch_size: int, min_fraction: float
) -> tuple[int, int, list[tuple[int, int, float]]]:
    h, w = mask.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch_size {patch_size} exceeds raster dims {h}x{w}")
    rows, cols = h // patch_size, w // patch_size
    cells = []
    for r in range(rows):
        for c in range(cols):
            block = mask[
                r * patch_size : (r + 1) * patch_size,
                c * patch_size : (c + 1) * patch_size,
            ]
            cov = float(np.count_nonzero(block)) / (patch_size * patch_size)
            if cov >= min_fraction:
                cells.append((r, c, cov))
    return rows, cols, cells


def tile_patches(
    section, patch_size: int, min_tissue_fraction: float = 0.25
) -> tuple[PatchGrid, list[tuple[int, int, int]]]:
    """Grid a registered section; returns (grid, [(index, row, col), ...]).

    Patches with tissue coverage below min_tissue_fraction (glass) are not
    emitted but still own their index.
    """
    rows, cols, cells = _tile_mask(section.tissue_mask, patch_size, min_tissue_fraction)
    grid = PatchGrid(
        patch_size=patch_size, rows=rows, cols=cols, section_index=section.index
    )
    emitted = [(grid.index_of(r, c), r, c) for r, c, _ in cells]
    return grid, emitted


# --- feature kinds ----------------------------------------------------------


def _hog_features(gray: np.ndarray) -> dict[str, float]:
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)  # unsigned gradients
    bins = np.minimum((ang / np.pi * HOG_BINS).astype(int), HOG_BINS - 1)

    h, w = gray.shape
    cr, cc = h // HOG_CELL, w // HOG_CELL
    if cr == 0 or cc == 0:
        raise ValueError(f"patch {h}x{w} smaller than HOG cell {HOG_CELL}")
    cells = np.zeros((cr, cc, HOG_BINS))
    sub_m = mag[: cr * HOG_CELL, : cc * HOG_CELL]
    sub_b = bins[: cr * HOG_CELL, : cc * HOG_CELL]
    cell_r = np.repeat(np.arange(cr), HOG_CELL)[:, None]
    cell_c = np.repeat(np.arange(cc), HOG_CELL)[None, :]
    np.add.at(cells, (np.broadcast_to(cell_r, sub_m.shape), np.broadcast_to(cell_c, sub_m.shape), sub_b), sub_m)

    # 2x2-cell blocks, stride one cell, L2 normalization
    if cr >= 2 and cc >= 2:
        blocks = np.stack(
            [cells[:-1, :-1], cells[:-1, 1:], cells[1:, :-1], cells[1:, 1:]], axis=2
        )  # (cr-1, cc-1, 4, bins)
        norms = np.sqrt(np.sum(blocks**2, axis=(2, 3), keepdims=True)) + 1e-12
        normalized = blocks / norms
        per_bin = normalized.mean(axis=(0, 1, 2))
    else:
        norms = np.sqrt(np.sum(cells**2, axis=2, keepdims=True)) + 1e-12
        per_bin = (cells / norms).mean(axis=(0, 1))

    out = {f"hog_{i}": float(per_bin[i]) for i in range(HOG_BINS)}
    out["hog_mean"] = float(per_bin.mean())
    return out


def _build_lbp_lookup() -> np.ndarray:
    table = np.full(256, LBP_BINS - 1, dtype=np.intp)
    uniform = []
    for pattern in range(256):
        bits = [(pattern >> k) & 1 for k in range(8)]
        transitions = sum(bits[k] != bits[(k + 1) % 8] for k in range(8))
        if transitions <= 2:
            uniform.append(pattern)
    for slot, pattern in enumerate(sorted(uniform)):
        table[pattern] = slot
    return table


LBP_LOOKUP = _build_lbp_lookup()
LBP_FLAT_BIN = int(LBP_LOOKUP[255])  # all neighbors >= center: constant patches


def _lbp_features(gray: np.ndarray) -> dict[str, float]:
    g = gray
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("patch too small for radius-1 LBP")
    c = g[1:-1, 1:-1]
    # 8 integer neighbors in circular (counterclockwise from east) order
    offsets = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    pattern = np.zeros(c.shape, dtype=np.intp)
    for k, (dy, dx) in enumerate(offsets):
        nb = g[1 + dy : g.shape[0] - 1 + dy, 1 + dx : g.shape[1] - 1 + dx]
        pattern |= (nb >= c).astype(np.intp) << k
    binned = LBP_LOOKUP[pattern]
    hist = np.bincount(binned.ravel(), minlength=LBP_BINS).astype(np.float64)
    hist /= hist.sum()
    return {f"lbp_{i}": float(hist[i]) for i in range(LBP_BINS)}


def _glcm_energy(gray: np.ndarray) -> dict[str, float]:
    q = np.clip((gray * GLCM_LEVELS / 256.0).astype(int), 0, GLCM_LEVELS - 1)
    a = q[:, :-1].ravel()
    b = q[:, 1:].ravel()  # co-occurrence at offset (1, 0)
    idx = np.concatenate([a * GLCM_LEVELS + b, b * GLCM_LEVELS + a])  # symmetric
    counts = np.bincount(idx, minlength=GLCM_LEVELS * GLCM_LEVELS).astype(np.float64)
    p = counts / counts.sum()
    return {"glcm_energy": float(np.sum(p * p))}


def _nuclei_features(patch: np.ndarray) -> dict[str, float]:
    rgb = np.asarray(patch)
    if rgb.ndim != 3:
        rgb = np.stack([rgb] * 3, axis=-1)
    hema = rgb2hed(rgb.astype(np.uint8))[..., 0]
    try:
        thresh = threshold_otsu(hema)
    except ValueError:  # constant channel
        return {"nuclei_count": 0.0, "nuclei_nn_mean": 0.0}
    labels, n = ndimage.label(hema > thresh)
    if n == 0:
        return {"nuclei_count": 0.0, "nuclei_nn_mean": 0.0}
    areas = np.bincount(labels.ravel())[1:]
    keep = np.nonzero(
        (areas >= NUCLEI_AREA_RANGE[0]) & (areas <= NUCLEI_AREA_RANGE[1])
    )[0] + 1
    if len(keep) == 0:
        return {"nuclei_count": 0.0, "nuclei_nn_mean": 0.0}
    centroids = np.asarray(ndimage.center_of_mass(hema > thresh, labels, keep))
    count = float(len(keep))
    if len(keep) < 2:
        return {"nuclei_count": count, "nuclei_nn_mean": 0.0}
    d = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return {"nuclei_count": count, "nuclei_nn_mean": float(d.min(axis=1).mean())}


def _intensity_features(gray: np.ndarray) -> dict[str, float]:
    if np.ptp(gray) == 0:  # constant patch: std is exactly 0
        return {"intensity_mean": float(gray.flat[0]), "intensity_std": 0.0}
    return {"intensity_mean": float(gray.mean()), "intensity_std": float(gray.std())}


def feature_vector(patch: np.ndarray, kind: str) -> dict[str, float]:
    """Named scalar feature values of one kind for an RGB patch."""
    p = np.asarray(patch)
    if p.shape[0] <= 0 or p.shape[1] <= 0:
        raise ValueError("non-positive patch dims")
    if kind == "nuclei":
        return _nuclei_features(p)
    gray = grayscale(p)
    if kind == "hog":
        return _hog_features(gray)
    if kind == "lbp":
        return _lbp_features(gray)
    if kind == "glcm_energy":
        return _glcm_energy(gray)
    if kind == "intensity":
        return _intensity_features(gray)
    raise ValueError(f"unknown feature kind {kind!r}")


def all_feature_values(patch: np.ndarray) -> dict[str, float]:
    out: dict[str, float] = {}
    for kind in FEATURE_KINDS:
        out.update(feature_vector(patch, kind))
    return out


# --- tables -----------------------------------------------------------------


@dataclass
class FeatureInstance:
    index: int
    section: int
    center_xy: tuple[float, float]  # native raster coords
    value: float
    position: np.ndarray | None = None  # model space, filled by normalize_and_index
    normalized: float | None = None
    percentile_rank: float | None = None
    tumor_id: str | None = None


@dataclass
class FeatureTable:
    feature_name: str
    instances: list[FeatureInstance] = field(default_factory=list)
    stats: dict | None = None


@dataclass(frozen=True)
class PositionMapper:
    """Native raster coords + section index -> organ model space.

    Composes the pixel-center-preserving downscale to mask space with the
    organ's per-axis mask-to-model similarity.
    """

    fraction: float
    z_spacing: float  # at `fraction`, in downscaled px
    scale_axis: np.ndarray  # (3,)
    offset: np.ndarray  # (3,)

    def map(self, x_native: float, y_native: float, section: int) -> np.ndarray:
        xm = (x_native + 0.5) * self.fraction - 0.5
        ym = (y_native + 0.5) * self.fraction - 0.5
        zm = section * self.z_spacing
        mask_pos = np.array([xm, ym, zm])
        return self.scale_axis * mask_pos + self.offset


def normalize_and_index(
    tables: list[FeatureTable],
    organ_report_model_space: GeometryReport,
    mapper: PositionMapper,
    tumor_masks: dict[str, list[np.ndarray | None]] | None = None,
) -> list[FeatureTable]:
    """Fill model-space positions, min-max normalization, mid-rank
    percentiles, and tumor membership for every table.

    Constant-valued features normalize to all zeros with percentile rank 50.
    """
    out_tables = []
    bbox_lo = organ_report_model_space.bbox_min
    bbox_hi = organ_report_model_space.bbox_max
    slack = 0.05 * organ_report_model_space.extents
    for table in tables:
        if not table.instances:
            raise ValueError(f"empty feature table {table.feature_name!r}")
        values = np.asarray([inst.value for inst in table.instances])
        vmin, vmax = float(values.min()), float(values.max())
        if vmax > vmin:
            normalized = (values - vmin) / (vmax - vmin)
        else:
            normalized = np.zeros_like(values)
        ranks = rankdata(values, method="average")
        percentiles = 100.0 * (ranks - 0.5) / len(values)

        new_instances = []
        for inst, nv, pr in zip(table.instances, normalized, percentiles):
            x, y = inst.center_xy
            pos = mapper.map(x, y, inst.section)
            if np.any(pos < bbox_lo - slack) or np.any(pos > bbox_hi + slack):
                log.warning(
                    "%s instance %d position %s outside organ bbox",
                    table.feature_name,
                    inst.index,
                    np.round(pos, 3),
                )
            tid = inst.tumor_id
            if tid is None and tumor_masks:
                iy, ix = int(round(y)), int(round(x))
                for cand in sorted(tumor_masks):
                    m = tumor_masks[cand][inst.section]
                    if (
                        m is not None
                        and 0 <= iy < m.shape[0]
                        and 0 <= ix < m.shape[1]
                        and m[iy, ix]
                    ):
                        tid = cand
                        break
            new_instances.append(
                replace(
                    inst,
                    position=pos,
                    normalized=float(nv),
                    percentile_rank=float(pr),
                    tumor_id=tid,
                )
            )
        stats = {
            "min": vmin,
            "max": vmax,
            "percentile_values": np.percentile(values, np.arange(101)).tolist(),
        }
        out_tables.append(
            FeatureTable(
                feature_name=table.feature_name, instances=new_instances, stats=stats
            )
        )
    return out_tables


def percentile_threshold(table: FeatureTable, q: float) -> list[FeatureInstance]:
    """Instances whose percentile rank reaches q; viewer reference semantics."""
    if not (0 <= q <= 100):
        raise ValueError(f"q must be in [0, 100], got {q}")
    return [inst for inst in table.instances if inst.percentile_rank >= q]


# --- CSV interface ----------------------------------------------------------

CSV_HEADER = "index,x,y,z,value,normalized,percentile,tumor_id"


def write_feature_csv(table: FeatureTable, path: Path | str) -> None:
    lines = [CSV_HEADER]
    for inst in table.instances:
        x, y, z = (float(v) for v in inst.position)
        tid = inst.tumor_id if inst.tumor_id is not None else ""
        lines.append(
            f"{inst.index},{x!r},{y!r},{z!r},{float(inst.value)!r},"
            f"{float(inst.normalized)!r},{float(inst.percentile_rank)!r},{tid}"
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_feature_csv(path: Path | str) -> FeatureTable:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad feature CSV header in {path}")
    instances = []
    for line in lines[1:]:
        parts = line.split(",")
        idx, x, y, z, value, normalized, percentile, tid = parts
        instances.append(
            FeatureInstance(
                index=int(idx),
                section=-1,
                center_xy=(float("nan"), float("nan")),
                value=float(value),
                position=np.array([float(x), float(y), float(z)]),
                normalized=float(normalized),
                percentile_rank=float(percentile),
                tumor_id=tid if tid else None,
            )
        )
    return FeatureTable(feature_name=Path(path).stem, instances=instances)
