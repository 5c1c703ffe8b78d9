"""Watertight surface meshes from registered mask stacks.

Reconstruction kernel: per-slice signed distance fields, linearly
interpolated across the inter-section gaps to near-isotropic voxels, one
empty padding layer on every face, iso-surface extraction at level 0,
vertex welding, duplicate-face removal, and volume-preserving (Taubin)
smoothing. Sparse slices come out as one smooth closed surface with planar
caps at the first and last sections.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from skimage import measure as sk_measure

from .stack import SectionStack, downscale_mask, z_spacing_px

__all__ = [
    "PointCloud",
    "SurfaceMesh",
    "GeometryReport",
    "extract_point_cloud",
    "reconstruct_surface",
    "build_tumor_mesh",
    "measure_geometry",
    "normalize_model",
    "align_tumor",
    "taubin_smooth",
    "mesh_volume",
    "validate_mesh",
    "write_stl",
    "read_stl",
]

log = logging.getLogger(__name__)

TUMOR_VOXEL_DEPTH = 1.2  # provisional z scale; true size set by align_tumor


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) x, y in downscaled px; z in px-equivalents
    source: str  # "organ" | "tumor"


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (t, 3) int

    def copy(self) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices.copy(), self.triangles.copy())


@dataclass
class GeometryReport:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    extents: np.ndarray
    center: np.ndarray
    vertex_count: int
    triangle_count: int

    def to_dict(self) -> dict:
        return {
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "extents": self.extents.tolist(),
            "center": self.center.tolist(),
            "vertex_count": self.vertex_count,
            "triangle_count": self.triangle_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryReport":
        return cls(
            bbox_min=np.asarray(d["bbox_min"], dtype=np.float64),
            bbox_max=np.asarray(d["bbox_max"], dtype=np.float64),
            extents=np.asarray(d["extents"], dtype=np.float64),
            center=np.asarray(d["center"], dtype=np.float64),
            vertex_count=int(d["vertex_count"]),
            triangle_count=int(d["triangle_count"]),
        )


def border_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    Out-of-raster counts as background, so pixels on the raster edge are
    border pixels.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return m & ~interior


def extract_point_cloud(stack: SectionStack, fraction: float) -> PointCloud:
    """Mask borders as 3D points at the sections' physical z positions.

    First and last sections contribute all their foreground pixels so the
    cloud closes with planar caps.
    """
    if not stack.sections:
        raise ValueError("empty stack")
    spacing = z_spacing_px(stack.metadata, fraction)
    last = len(stack.sections) - 1
    pts = []
    for s in stack.sections:
        m = downscale_mask(s.tissue_mask, fraction)
        sel = m if s.index in (0, last) else border_pixels(m)
        ys, xs = np.nonzero(sel)
        if len(xs):
            z = np.full(len(xs), s.index * spacing)
            pts.append(np.column_stack([xs.astype(np.float64), ys.astype(np.float64), z]))
    if not pts:
        raise ValueError("no foreground in any section")
    return PointCloud(points=np.concatenate(pts, axis=0), source="organ")


def _slice_sdf(mask: np.ndarray, empty_value: float) -> np.ndarray:
    """Signed distance on a 1-px padded grid: positive inside, negative out."""
    m = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    if not m.any():
        return np.full(m.shape, empty_value)
    inside = ndimage.distance_transform_edt(m)
    outside = ndimage.distance_transform_edt(~m)
    return inside - outside


def _volume_from_slices(
    masks: list[np.ndarray], slice_spacing: float
) -> tuple[np.ndarray, float]:
    """Stack per-slice SDFs into a near-isotropic volume.

    Intermediate layers (round(slice_spacing) - 1 of them per gap) are linear
    interpolations of the bounding slices; one empty layer pads every face.
    Returns (volume[z, y, x], z_step) with z_step = spacing / round(spacing).
    """
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"slice shapes differ: {shapes}")
    h, w = masks[0].shape
    empty = -float(np.hypot(h + 2, w + 2))
    sdfs = [_slice_sdf(m, empty) for m in masks]

    n_sub = max(1, round(slice_spacing))
    z_step = slice_spacing / n_sub
    layers = [np.full(sdfs[0].shape, empty)]  # bottom pad
    for i, sdf in enumerate(sdfs):
        if i > 0:
            prev = sdfs[i - 1]
            for k in range(1, n_sub):
                a = k / n_sub
                layers.append((1 - a) * prev + a * sdf)
        layers.append(sdf)
    layers.append(np.full(sdfs[0].shape, empty))  # top pad
    return np.stack(layers, axis=0), z_step


def _extract_iso_surface(volume: np.ndarray, z_step: float) -> SurfaceMesh:
    """Marching cubes at level 0, coordinates back in slice space."""
    if not (volume > 0).any():
        raise ValueError("no foreground")
    # nudge exact zeros off the level so no vertex lands on a grid node
    vol = np.where(volume == 0.0, 1e-9, volume)
    verts, faces, _, _ = sk_measure.marching_cubes(vol, level=0.0)
    xyz = np.column_stack(
        [verts[:, 2] - 1.0, verts[:, 1] - 1.0, (verts[:, 0] - 1.0) * z_step]
    )
    mesh = SurfaceMesh(vertices=xyz, triangles=faces.astype(np.intp))
    mesh = weld_vertices(mesh)
    mesh = remove_duplicate_faces(mesh)
    return orient_outward(mesh)


def weld_vertices(mesh: SurfaceMesh) -> SurfaceMesh:
    uniq, inverse = np.unique(mesh.vertices, axis=0, return_inverse=True)
    tri = inverse[mesh.triangles]
    degenerate = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
    return SurfaceMesh(vertices=uniq, triangles=tri[~degenerate])


def remove_duplicate_faces(mesh: SurfaceMesh) -> SurfaceMesh:
    key = np.sort(mesh.triangles, axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    return SurfaceMesh(vertices=mesh.vertices, triangles=mesh.triangles[np.sort(first)])


def mesh_volume(mesh: SurfaceMesh) -> float:
    """Signed volume by the divergence theorem; positive for outward winding."""
    v = mesh.vertices
    t = mesh.triangles
    return float(
        np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0
    )


def orient_outward(mesh: SurfaceMesh) -> SurfaceMesh:
    if mesh_volume(mesh) < 0:
        mesh = SurfaceMesh(mesh.vertices, mesh.triangles[:, [0, 2, 1]])
    return mesh


def taubin_smooth(
    mesh: SurfaceMesh, iterations: int = 20, lam: float = 0.5, mu: float = -0.53
) -> SurfaceMesh:
    """Volume-preserving two-step Laplacian smoothing (shrink + inflate)."""
    if iterations <= 0:
        return mesh.copy()
    n = len(mesh.vertices)
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    deg = np.maximum(np.asarray(adj.sum(axis=1)).ravel(), 1.0)
    pos = mesh.vertices.copy()
    for _ in range(iterations):
        lap = adj @ pos / deg[:, None] - pos
        pos = pos + lam * lap
        lap = adj @ pos / deg[:, None] - pos
        pos = pos + mu * lap
    return SurfaceMesh(vertices=pos, triangles=mesh.triangles.copy())


def _reconstruct(masks: list[np.ndarray], slice_spacing: float, smoothing: int) -> SurfaceMesh:
    volume, z_step = _volume_from_slices(masks, slice_spacing)
    mesh = _extract_iso_surface(volume, z_step)
    mesh = taubin_smooth(mesh, iterations=smoothing)
    return orient_outward(mesh)


def reconstruct_surface(
    stack: SectionStack, fraction: float, smoothing: int = 20
) -> SurfaceMesh:
    """Organ surface from the registered tissue masks."""
    masks = [downscale_mask(s.tissue_mask, fraction) for s in stack.sections]
    if not any(m.any() for m in masks):
        raise ValueError("no foreground")
    spacing = z_spacing_px(stack.metadata, fraction)
    return _reconstruct(masks, spacing, smoothing)


def build_tumor_mesh(
    tumor_masks: list[np.ndarray | None], fraction: float, smoothing: int = 20
) -> SurfaceMesh:
    """Tumor surface from its per-section masks.

    Masks are binarized and dilated twice (3x3 square) before stacking into a
    volume with provisional voxel depth 1.2; align_tumor computes the true
    size afterwards.
    """
    present = [m for m in tumor_masks if m is not None]
    if not present or not any(np.asarray(m).any() for m in present):
        raise ValueError("tumor absent from all sections")
    shape = downscale_mask(np.asarray(present[0], dtype=bool), fraction).shape
    prepared = []
    for m in tumor_masks:
        if m is None:
            prepared.append(np.zeros(shape, dtype=bool))
            continue
        small = downscale_mask(np.asarray(m) > 0, fraction)
        prepared.append(
            ndimage.binary_dilation(small, structure=np.ones((3, 3), bool), iterations=2)
        )
    occupied = [i for i, m in enumerate(prepared) if m.any()]
    if not occupied:
        raise ValueError("tumor vanished at this downscale fraction")
    return _reconstruct(
        prepared[occupied[0] : occupied[-1] + 1], TUMOR_VOXEL_DEPTH, smoothing
    )


def measure_geometry(mesh: SurfaceMesh) -> GeometryReport:
    if not len(mesh.vertices):
        raise ValueError("empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return GeometryReport(
        bbox_min=lo,
        bbox_max=hi,
        extents=hi - lo,
        center=(lo + hi) / 2.0,
        vertex_count=len(mesh.vertices),
        triangle_count=len(mesh.triangles),
    )


def rotation_matrix(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("zero rotation axis")
    x, y, z = a / norm
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def normalize_model(
    mesh: SurfaceMesh,
    target_height: float = 1.0,
    rotation: np.ndarray | None = None,
) -> tuple[SurfaceMesh, GeometryReport]:
    """Scale to a fixed z height, rotate for alignment, center at the origin.

    All samples share the section count, so equal heights make models
    comparable. The z-extent guarantee holds for rotations that preserve the
    z measure (the default is identity).
    """
    rep = measure_geometry(mesh)
    z_extent = rep.extents[2]
    if z_extent <= 0:
        raise ValueError("mesh has zero z-extent")
    s = target_height / z_extent
    verts = mesh.vertices * s
    if rotation is not None:
        verts = verts @ np.asarray(rotation, dtype=np.float64).T
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    verts = verts - (lo + hi) / 2.0
    out = SurfaceMesh(vertices=verts, triangles=mesh.triangles.copy())
    return out, measure_geometry(out)


def mask_to_model_similarity(
    organ_mask_report: GeometryReport, organ_model_report: GeometryReport
) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis scale and offset mapping mask space into model space."""
    denom = np.where(organ_mask_report.extents > 0, organ_mask_report.extents, 1.0)
    s = np.where(organ_mask_report.extents > 0, organ_model_report.extents / denom, 1.0)
    offset = organ_model_report.center - s * organ_mask_report.center
    return s, offset


def align_tumor(
    tumor_mesh: SurfaceMesh,
    tumor_report_mask_space: GeometryReport,
    organ_report_mask_space: GeometryReport,
    organ_report_model_space: GeometryReport,
) -> SurfaceMesh:
    """Scale and place a tumor mesh inside the organ model.

    Desired size and center come from the tumor's mask-space bbox pushed
    through the organ's mask-to-model similarity; the mesh is scaled
    uniformly by the x-extent ratio and translated so its bbox center lands
    on the desired center. Anisotropy beyond 2% between the per-axis ratios
    is reported as a warning.
    """
    s_axis, offset = mask_to_model_similarity(
        organ_report_mask_space, organ_report_model_space
    )
    p0 = s_axis * tumor_report_mask_space.center + offset
    s0 = s_axis * tumor_report_mask_space.extents

    rep = measure_geometry(tumor_mesh)
    s1, p1 = rep.extents, rep.center
    if s1[0] <= 0:
        raise ValueError("degenerate tumor mesh extents")
    factor = s0[0] / s1[0]
    for axis, name in ((1, "y"), (2, "z")):
        if s1[axis] > 0:
            ratio = s0[axis] / s1[axis]
            if abs(ratio - factor) > 0.02 * abs(factor):
                log.warning(
                    "tumor %s-extent ratio %.4f deviates >2%% from x ratio %.4f",
                    name,
                    ratio,
                    factor,
                )
    verts = tumor_mesh.vertices * factor
    verts = verts + (p0 - p1 * factor)
    return SurfaceMesh(vertices=verts, triangles=tumor_mesh.triangles.copy())


def validate_mesh(mesh: SurfaceMesh) -> dict:
    """Watertightness, winding consistency, duplicates, orientation."""
    tri = mesh.triangles
    directed = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, und_counts = np.unique(und, axis=0, return_counts=True)
    _, dir_counts = np.unique(directed, axis=0, return_counts=True)
    _, face_counts = np.unique(np.sort(tri, axis=1), axis=0, return_counts=True)
    vol = mesh_volume(mesh)
    return {
        "watertight": bool(np.all(und_counts == 2)),
        "consistent_winding": bool(np.all(dir_counts == 1)),
        "no_duplicate_faces": bool(np.all(face_counts == 1)),
        "signed_volume": vol,
        "outward": vol > 0,
    }


# --- binary STL -------------------------------------------------------------

_STL_HEADER = b"histo3d binary stl" + b"\0" * 62


def write_stl(mesh: SurfaceMesh, path: Path | str) -> None:
    """Binary STL: 80-byte header, uint32 count, then per-triangle
    normal + 3 vertices as float32 and a zero uint16 attribute."""
    tri = mesh.triangles
    v = mesh.vertices
    n = len(tri)
    rec = np.zeros(
        n,
        dtype=np.dtype(
            [("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
        ),
    )
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    nrm = np.cross(p1 - p0, p2 - p0)
    lens = np.linalg.norm(nrm, axis=1)
    nrm = nrm / np.where(lens > 0, lens, 1.0)[:, None]
    rec["normal"] = nrm.astype("<f4")
    rec["verts"][:, 0] = p0.astype("<f4")
    rec["verts"][:, 1] = p1.astype("<f4")
    rec["verts"][:, 2] = p2.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_STL_HEADER)
        fh.write(struct.pack("<I", n))
        fh.write(rec.tobytes())


def read_stl(path: Path | str) -> SurfaceMesh:
    """Read a binary STL back into an indexed mesh (exact float32 welding)."""
    with open(path, "rb") as fh:
        fh.read(80)
        (n,) = struct.unpack("<I", fh.read(4))
        rec = np.frombuffer(
            fh.read(n * 50),
            dtype=np.dtype(
                [("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")]
            ),
            count=n,
        )
    flat = rec["verts"].reshape(-1, 3).astype(np.float64)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    return SurfaceMesh(vertices=uniq, triangles=inverse.reshape(-1, 3))


def write_geometry_reports(reports: dict[str, GeometryReport], path: Path | str) -> None:
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_geometry_reports(path: Path | str) -> dict[str, GeometryReport]:
    with open(path) as fh:
        payload = json.load(fh)
    return {name: GeometryReport.from_dict(d) for name, d in payload.items()}
