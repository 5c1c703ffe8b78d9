"""Elastic co-registration of a section stack.

Pipeline per adjacent section pair: exhaustive NCC block matching at the
spring-lattice vertices (both directions), outlier rejection by score floor
plus neighbor-median consensus, cross springs from accepted matches, global
relaxation with section 0 anchored, then piecewise-linear warping of images
and masks through the deformed lattices.
"""

from __future__ import annotations

import os
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve

from .springs import CrossSpring, SpringMesh, build_triangular_mesh, relax
from .stack import Section, SectionStack, downscale_mask, save_stack

__all__ = [
    "RegistrationParams",
    "BlockMatch",
    "PiecewiseLinearTransform",
    "RegistrationResult",
    "FlatPatchError",
    "ncc",
    "block_match",
    "extract_transform",
    "warp",
    "register_stack",
]

log = logging.getLogger(__name__)

_FLAT_STD = 1e-9


class FlatPatchError(ValueError):
    """Patch has (numerically) zero intensity variance; no NCC defined."""


@dataclass(frozen=True)
class RegistrationParams:
    """Tunables for block matching and relaxation.

    `scale` is the working resolution of registration relative to the stack
    rasters; extracted transforms are rescaled back before warping.
    """

    block_radius: int = 32
    search_radius: int = 48
    mesh_pitch: float = 64.0
    min_ncc: float = 0.6
    min_patch_tissue: float = 0.5  # tissue coverage gate for source patches
    cross_stiffness: float = 1.0
    intra_stiffness: float = 1.0
    step_size: float = 0.1
    max_iters: int = 5000
    converge_eps: float = 0.002
    scale: float = 0.1

    def __post_init__(self):
        for name in (
            "block_radius",
            "search_radius",
            "mesh_pitch",
            "cross_stiffness",
            "intra_stiffness",
            "step_size",
            "max_iters",
            "converge_eps",
            "scale",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.min_ncc < 1):
            raise ValueError(f"min_ncc must be in (0,1), got {self.min_ncc}")
        if not (0 <= self.min_patch_tissue <= 1):
            raise ValueError(
                f"min_patch_tissue must be in [0,1], got {self.min_patch_tissue}"
            )


@dataclass
class BlockMatch:
    vertex_index: int
    source_pos: np.ndarray  # (2,) x, y on the source section
    target_pos: np.ndarray  # (2,) x, y on the neighbor section
    score: float
    accepted: bool

    def __post_init__(self):
        if not (-1.0 <= self.score <= 1.0):
            raise ValueError(f"NCC score out of [-1,1]: {self.score}")

    @property
    def offset(self) -> np.ndarray:
        return self.target_pos - self.source_pos


def ncc(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-size patches.

    sum((a - mean a)(b - mean b)) / (N * std a * std b), clamped to [-1, 1].
    Raises FlatPatchError when either patch has no intensity variance.
    """
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    a0 = a - a.mean()
    b0 = b - b.mean()
    sa = np.sqrt(np.mean(a0 * a0))
    sb = np.sqrt(np.mean(b0 * b0))
    if sa <= _FLAT_STD or sb <= _FLAT_STD:
        raise FlatPatchError("flat patch")
    score = float(np.sum(a0 * b0) / (a.size * sa * sb))
    return float(np.clip(score, -1.0, 1.0))


def _parabolic_offset(line: np.ndarray, k: int) -> float:
    """Sub-sample vertex of the parabola through (k-1, k, k+1), in [-0.5, 0.5]."""
    if k <= 0 or k >= len(line) - 1:
        return 0.0
    a, b, c = line[k - 1], line[k], line[k + 1]
    denom = a - 2 * b + c
    if denom >= 0:  # not a proper maximum
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def _ncc_scan(window: np.ndarray, patch: np.ndarray) -> np.ndarray | None:
    """NCC of `patch` against every offset of equal-size windows inside
    `window`, via FFT numerator and integral-image normalization.

    Returns None when the patch is flat. Flat window positions score 0.
    """
    p0 = patch - patch.mean()
    sp = np.sqrt(np.sum(p0 * p0))
    if sp <= _FLAT_STD * patch.size:
        return None
    # sum(p0) == 0, so the window-mean term of the numerator cancels
    num = fftconvolve(window, p0[::-1, ::-1], mode="valid")
    k = patch.shape[0]
    c = np.cumsum(np.cumsum(np.pad(window, ((1, 0), (1, 0))), axis=0), axis=1)
    c2 = np.cumsum(
        np.cumsum(np.pad(window * window, ((1, 0), (1, 0))), axis=0), axis=1
    )
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    s2 = c2[k:, k:] - c2[:-k, k:] - c2[k:, :-k] + c2[:-k, :-k]
    var = np.maximum(s2 - s * s / (k * k), 0.0)
    den = sp * np.sqrt(var)
    out = np.where(den > 1e-9, num / np.where(den > 1e-9, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def block_match(
    section_i: np.ndarray,
    section_j: np.ndarray,
    mesh: SpringMesh,
    params: RegistrationParams,
    tissue_mask: np.ndarray | None = None,
    prior_rigid: tuple[np.ndarray, np.ndarray] | None = None,
    subpixel: bool = False,
) -> list[BlockMatch]:
    """Match every lattice vertex of section i against section j.

    For each vertex inside the tissue mask, exhaustively scans all integer
    offsets within search_radius and reports the argmax-NCC offset. A match
    is accepted iff its score reaches min_ncc, the source patch is non-flat,
    and its displacement stays within 2 * mesh_pitch of the median
    displacement of its lattice neighbors.

    `prior_rigid` (rotation, translation mapping i coords into j coords)
    resamples the target through the rigid estimate before scanning, so the
    correlation is unbiased by inter-section rotation; reported target
    positions are mapped back through the prior. An identity prior is a
    no-op (integer offsets stay exact).

    `subpixel` adds a parabolic refinement of the correlation peak. It is
    off by default (the contract reports the argmax offset); register_stack
    enables it because the fractional part of a pair's true offset otherwise
    rounds the same way at every vertex, a bias that random-walks along the
    section chain.
    """
    img_i = np.asarray(section_i, dtype=np.float64)
    img_j = np.asarray(section_j, dtype=np.float64)
    if img_i.shape != img_j.shape:
        raise ValueError("sections must share raster dims")
    h, w = img_i.shape
    br, sr = params.block_radius, params.search_radius
    pad = br + sr
    if prior_rigid is not None:
        # target resampled so that pixel p of the warped image shows the
        # target content at R p + t; matching then sees ~pure translation
        r_p, t_p = prior_rigid
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        jx = r_p[0, 0] * xx + r_p[0, 1] * yy + t_p[0]
        jy = r_p[1, 0] * xx + r_p[1, 1] * yy + t_p[1]
        img_j = map_coordinates(img_j, np.array([jy, jx]), order=1, mode="nearest")
    pad_i = np.pad(img_i, pad, mode="edge")
    pad_j = np.pad(img_j, pad, mode="edge")
    pad_m = (
        np.pad(tissue_mask.astype(np.float64), pad, mode="constant")
        if tissue_mask is not None
        else None
    )

    results: dict[int, tuple[np.ndarray, np.ndarray, float, bool]] = {}
    for v in range(mesh.n_vertices):
        x = int(round(mesh.rest[v, 0]))
        y = int(round(mesh.rest[v, 1]))
        x = min(max(x, 0), w - 1)
        y = min(max(y, 0), h - 1)
        if tissue_mask is not None:
            if not tissue_mask[y, x]:
                continue
            cov = pad_m[
                y + sr : y + sr + 2 * br + 1, x + sr : x + sr + 2 * br + 1
            ].mean()
            if cov < params.min_patch_tissue:
                continue  # mostly-glass patches match on the artificial border
        patch = pad_i[y + sr : y + sr + 2 * br + 1, x + sr : x + sr + 2 * br + 1]
        window = pad_j[y : y + 2 * pad + 1, x : x + 2 * pad + 1]
        scan = _ncc_scan(window, patch)
        if scan is None:
            continue
        oy, ox = np.unravel_index(int(np.argmax(scan)), scan.shape)
        score = float(scan[oy, ox])
        off = np.array([ox - sr, oy - sr], dtype=np.float64)
        if subpixel:
            off[0] += _parabolic_offset(scan[oy, :], ox)
            off[1] += _parabolic_offset(scan[:, ox], oy)
        src = np.array([x, y], dtype=np.float64)
        tgt = src + off
        if prior_rigid is not None:
            r_p, t_p = prior_rigid
            tgt = r_p @ tgt + t_p
        results[v] = (src, tgt, score, score >= params.min_ncc)

    # consensus rejection against the median displacement of lattice
    # neighbors, falling back to the whole-section median when a vertex has
    # too few matched neighbors
    neighbors = mesh.neighbor_lists()
    offsets = {v: tgt - src for v, (src, tgt, _, ok) in results.items() if ok}
    global_med = (
        np.median(np.asarray(list(offsets.values())), axis=0) if offsets else None
    )
    matches: list[BlockMatch] = []
    for v in sorted(results):
        src, tgt, score, ok = results[v]
        if ok:
            ref = [offsets[n] for n in neighbors[v] if n in offsets and n != v]
            med = (
                np.median(np.asarray(ref), axis=0) if len(ref) >= 3 else global_med
            )
            if med is not None and np.linalg.norm(offsets[v] - med) >= 2 * params.mesh_pitch:
                ok = False
        matches.append(
            BlockMatch(
                vertex_index=v, source_pos=src, target_pos=tgt, score=score, accepted=ok
            )
        )
    return matches


@dataclass
class PiecewiseLinearTransform:
    """Continuous piecewise-affine map defined by a deformed triangulation.

    Maps rest-space points to deformed space by barycentric interpolation of
    per-vertex displacements. Points outside the lattice hull are flagged.
    """

    rest: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (t, 3)
    displacements: np.ndarray  # (n, 2)
    inverted_triangles: list[int] = field(default_factory=list)

    @property
    def deformed(self) -> np.ndarray:
        return self.rest + self.displacements

    def scaled(self, factor: float) -> "PiecewiseLinearTransform":
        return PiecewiseLinearTransform(
            rest=self.rest * factor,
            triangles=self.triangles,
            displacements=self.displacements * factor,
            inverted_triangles=list(self.inverted_triangles),
        )

    def apply(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map rest-space points; returns (mapped, inside_hull mask).

        Points on shared edges are claimed by the lowest triangle index;
        continuity makes the choice irrelevant to the mapped value.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        tri_idx, weights = _locate(self.rest, self.triangles, pts)
        inside = tri_idx >= 0
        mapped = pts.copy()
        if inside.any():
            tri = self.triangles[tri_idx[inside]]
            disp = np.einsum("ij,ijk->ik", weights[inside], self.displacements[tri])
            mapped[inside] = pts[inside] + disp
        return mapped, inside


_BARY_EPS = 1e-9


def _locate(
    verts: np.ndarray, triangles: np.ndarray, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Assign each point the lowest-index triangle containing it.

    Returns (tri_idx with -1 outside, barycentric weights)."""
    n = len(pts)
    tri_idx = np.full(n, -1, dtype=np.intp)
    weights = np.zeros((n, 3))
    remaining = np.arange(n)
    for t, (a, b, c) in enumerate(triangles):
        if not len(remaining):
            break
        p0, p1, p2 = verts[a], verts[b], verts[c]
        d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(d) < 1e-12:
            continue
        rel = pts[remaining] - p0
        w1 = (rel[:, 0] * (p2[1] - p0[1]) - rel[:, 1] * (p2[0] - p0[0])) / d
        w2 = (rel[:, 1] * (p1[0] - p0[0]) - rel[:, 0] * (p1[1] - p0[1])) / d
        w0 = 1.0 - w1 - w2
        hit = (w0 >= -_BARY_EPS) & (w1 >= -_BARY_EPS) & (w2 >= -_BARY_EPS)
        if hit.any():
            sel = remaining[hit]
            tri_idx[sel] = t
            weights[sel, 0] = w0[hit]
            weights[sel, 1] = w1[hit]
            weights[sel, 2] = w2[hit]
            remaining = remaining[~hit]
    return tri_idx, weights


def extract_transform(mesh: SpringMesh) -> PiecewiseLinearTransform:
    """Read the piecewise-linear warp off a (relaxed) spring mesh.

    Triangles whose deformed signed area flips negative are recorded as
    warnings on the transform, not failures: small fold-overs at tissue
    borders are expected.
    """
    disp = mesh.current - mesh.rest
    deformed = mesh.current
    tri = mesh.triangles
    p0, p1, p2 = deformed[tri[:, 0]], deformed[tri[:, 1]], deformed[tri[:, 2]]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
        p1[:, 1] - p0[:, 1]
    ) * (p2[:, 0] - p0[:, 0])
    inverted = np.nonzero(area2 < 0)[0].tolist()
    if inverted:
        log.warning("%d inverted triangle(s) in extracted transform", len(inverted))
    return PiecewiseLinearTransform(
        rest=mesh.rest.copy(),
        triangles=tri.copy(),
        displacements=disp,
        inverted_triangles=inverted,
    )


def inverse_sample_maps(
    t: PiecewiseLinearTransform, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-output-pixel source coordinates under the inverse of `t`.

    Rasterizes the deformed triangles (lowest index claims a pixel first) and
    maps each claimed pixel back to rest space through the triangle's affine
    inverse. Returns (src_x, src_y, valid).
    """
    h, w = shape
    src_x = np.zeros((h, w))
    src_y = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    deformed = t.deformed
    for a, b, c in t.triangles:
        p0, p1, p2 = deformed[a], deformed[b], deformed[c]
        d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(d) < 1e-12:
            continue
        x_lo = max(int(np.floor(min(p0[0], p1[0], p2[0]))), 0)
        x_hi = min(int(np.ceil(max(p0[0], p1[0], p2[0]))) + 1, w)
        y_lo = max(int(np.floor(min(p0[1], p1[1], p2[1]))), 0)
        y_hi = min(int(np.ceil(max(p0[1], p1[1], p2[1]))) + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        relx = xs - p0[0]
        rely = ys - p0[1]
        w1 = (relx * (p2[1] - p0[1]) - rely * (p2[0] - p0[0])) / d
        w2 = (rely * (p1[0] - p0[0]) - relx * (p1[1] - p0[1])) / d
        w0 = 1.0 - w1 - w2
        inside = (
            (w0 >= -_BARY_EPS)
            & (w1 >= -_BARY_EPS)
            & (w2 >= -_BARY_EPS)
            & ~valid[y_lo:y_hi, x_lo:x_hi]
        )
        if not inside.any():
            continue
        r0, r1, r2 = t.rest[a], t.rest[b], t.rest[c]
        sx = w0 * r0[0] + w1 * r1[0] + w2 * r2[0]
        sy = w0 * r0[1] + w1 * r1[1] + w2 * r2[1]
        region_x = src_x[y_lo:y_hi, x_lo:x_hi]
        region_y = src_y[y_lo:y_hi, x_lo:x_hi]
        region_x[inside] = sx[inside]
        region_y[inside] = sy[inside]
        valid[y_lo:y_hi, x_lo:x_hi] |= inside
    return src_x, src_y, valid


def _sample(
    raster: np.ndarray,
    src_x: np.ndarray,
    src_y: np.ndarray,
    valid: np.ndarray,
    interpolation: str,
) -> np.ndarray:
    order = {"nearest": 0, "bilinear": 1}[interpolation]
    # claimed pixels are inside the hull; snap float-eps overshoot at the
    # raster border back in so it cannot read the constant background
    coords = np.array(
        [
            np.clip(src_y[valid], 0, raster.shape[0] - 1),
            np.clip(src_x[valid], 0, raster.shape[1] - 1),
        ]
    )
    if raster.ndim == 2:
        out = np.zeros(valid.shape, dtype=raster.dtype)
        vals = map_coordinates(
            raster.astype(np.float64), coords, order=order, mode="constant", cval=0.0
        )
        if raster.dtype == bool:
            out[valid] = vals > 0.5
        else:
            out[valid] = np.clip(np.round(vals), 0, 255).astype(raster.dtype) if np.issubdtype(
                raster.dtype, np.integer
            ) else vals.astype(raster.dtype)
        return out
    out = np.zeros(valid.shape + (raster.shape[2],), dtype=raster.dtype)
    for ch in range(raster.shape[2]):
        vals = map_coordinates(
            raster[..., ch].astype(np.float64),
            coords,
            order=order,
            mode="constant",
            cval=0.0,
        )
        if np.issubdtype(raster.dtype, np.integer):
            out[..., ch][valid] = np.clip(np.round(vals), 0, 255).astype(raster.dtype)
        else:
            out[..., ch][valid] = vals.astype(raster.dtype)
    return out


def warp(
    raster: np.ndarray,
    t: PiecewiseLinearTransform,
    interpolation: str = "nearest",
) -> np.ndarray:
    """Resample a raster through the transform by inverse mapping.

    Output pixels outside the deformed lattice hull become background (0).
    Masks should use nearest, images bilinear.
    """
    if interpolation not in ("nearest", "bilinear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    src_x, src_y, valid = inverse_sample_maps(t, raster.shape[:2])
    return _sample(raster, src_x, src_y, valid, interpolation)


@dataclass
class RegistrationResult:
    stack: SectionStack
    transforms: list[PiecewiseLinearTransform]  # native-resolution, per section
    energy_trace: list[float]
    matches: list[tuple[int, int, list[BlockMatch]]]  # (source, target, matches)


def _to_gray(section: Section) -> np.ndarray:
    if section.image is not None:
        img = section.image.astype(np.float64)
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return section.tissue_mask.astype(np.float64) * 255.0


def _downscale_gray(img: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return img
    from PIL import Image as PILImage

    h, w = img.shape
    oh, ow = max(1, round(h * scale)), max(1, round(w * scale))
    pil = PILImage.fromarray(img.astype(np.float32), mode="F")
    return np.asarray(pil.resize((ow, oh), PILImage.BILINEAR), dtype=np.float64)


def _kabsch_2d(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid map dst ~= R @ src + t."""
    src_c, dst_c = src.mean(axis=0), dst.mean(axis=0)
    a = src - src_c
    b = dst - dst_c
    num = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    den = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    theta = np.arctan2(num, den)
    r = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return r, dst_c - r @ src_c


def _trimmed_kabsch(
    src: np.ndarray, dst: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rigid fit with one outlier-trimming pass; returns (R, t, keep mask)."""
    r, t = _kabsch_2d(src, dst)
    resid = np.linalg.norm(dst - (src @ r.T + t), axis=1)
    keep = resid <= max(3.0 * np.median(resid), 2.0)
    if keep.sum() >= 3 and not keep.all():
        r, t = _kabsch_2d(src[keep], dst[keep])
    else:
        keep = np.ones(len(src), dtype=bool)
    return r, t, keep


def _pair_rigid_estimates(
    n_sections: int, pair_matches: list[tuple[int, int, list[BlockMatch]]]
) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Per-direction rigid maps (source coords -> target coords) from the
    accepted matches of both directions of each pair."""
    pts: dict[tuple[int, int], tuple[list, list]] = {}
    for si, sj, matches in pair_matches:
        fwd = pts.setdefault((si, sj), ([], []))
        rev = pts.setdefault((sj, si), ([], []))
        for m in matches:
            if not m.accepted:
                continue
            fwd[0].append(m.source_pos)
            fwd[1].append(m.target_pos)
            rev[0].append(m.target_pos)
            rev[1].append(m.source_pos)
    out = {}
    for key, (src, dst) in pts.items():
        if len(src) >= 3:
            r, t, _ = _trimmed_kabsch(np.asarray(src), np.asarray(dst))
        else:
            r, t = np.eye(2), np.zeros(2)
        out[key] = (r, t)
    return out


def _chain_init(
    meshes: list[SpringMesh],
    pair_matches: list[tuple[int, int, list[BlockMatch]]],
) -> None:
    """Warm-start relaxation by composing per-pair map estimates away from
    the anchor section.

    Each pair map is a rigid (Kabsch) fit of its accepted matches plus a
    linearly interpolated residual field, so both the rigid jitter and the
    smooth elastic part start near equilibrium; relaxation then only has to
    polish local disagreements instead of propagating corrections through
    the whole section chain. Identity matches leave every mesh untouched.
    """
    from scipy.interpolate import griddata

    n = len(meshes)
    pair_pts: dict[int, tuple[list, list]] = {i: ([], []) for i in range(n - 1)}
    for si, sj, matches in pair_matches:
        lo = min(si, sj)
        hi_list, lo_list = pair_pts[lo]
        for m in matches:
            if not m.accepted:
                continue
            if si < sj:  # source lives in the lower section
                hi_list.append(m.target_pos)
                lo_list.append(m.source_pos)
            else:
                hi_list.append(m.source_pos)
                lo_list.append(m.target_pos)

    for i in range(1, n):
        mesh = meshes[i]
        prev = meshes[i - 1]
        hi_list, lo_list = pair_pts[i - 1]
        rest = mesh.rest
        if len(hi_list) >= 3:
            hi = np.asarray(hi_list)
            lo = np.asarray(lo_list)
            # trim gross outliers the consensus filter could not see
            r, t, keep = _trimmed_kabsch(hi, lo)
            hi, lo = hi[keep], lo[keep]
            resid = lo - (hi @ r.T + t)
            interp = griddata(hi, resid, rest, method="linear")
            nearest = griddata(hi, resid, rest, method="nearest")
            interp = np.where(np.isnan(interp), nearest, interp)
            in_prev = rest @ r.T + t + interp
        elif len(hi_list) >= 2:
            r, t = _kabsch_2d(np.asarray(hi_list), np.asarray(lo_list))
            in_prev = rest @ r.T + t
        else:
            in_prev = rest.copy()
        # push through the previous mesh's accumulated deformation
        mapped, inside = PiecewiseLinearTransform(
            rest=prev.rest,
            triangles=prev.triangles,
            displacements=prev.current - prev.rest,
        ).apply(in_prev)
        mesh.current = np.where(inside[:, None], mapped, in_prev)


def _attach_cross_springs(
    meshes: list[SpringMesh],
    si: int,
    sj: int,
    matches: list[BlockMatch],
    stiffness: float,
) -> list[CrossSpring]:
    target = meshes[sj]
    pts = np.asarray([m.target_pos for m in matches if m.accepted])
    if not len(pts):
        return []
    tri_idx, weights = _locate(target.rest, target.triangles, pts)
    springs = []
    k = 0
    for m in matches:
        if not m.accepted:
            continue
        ti = tri_idx[k]
        if ti >= 0:
            springs.append(
                CrossSpring(
                    source_mesh=si,
                    source_vertex=m.vertex_index,
                    target_mesh=sj,
                    target_triangle=target.triangles[ti].copy(),
                    weights=weights[k].copy(),
                    stiffness=stiffness,
                )
            )
        k += 1
    return springs


def _worker_count() -> int:
    env = os.environ.get("HISTO3D_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def register_stack(
    stack: SectionStack, params: RegistrationParams
) -> RegistrationResult:
    """Elastically co-register all sections; returns warped stack + transforms.

    Deterministic for fixed inputs and params: matching runs per pair in a
    worker pool but results merge in pair order, and relaxation is a
    synchronous Jacobi iteration.
    """
    if stack.registered:
        raise ValueError("stack already registered")
    if len(stack.sections) < 2:
        raise ValueError("need at least 2 sections")

    t0 = time.time()
    scale = params.scale
    grays = [_downscale_gray(_to_gray(s), scale) for s in stack.sections]
    masks = [
        downscale_mask(s.tissue_mask, scale) if scale != 1.0 else s.tissue_mask
        for s in stack.sections
    ]
    h, w = grays[0].shape
    meshes = [
        build_triangular_mesh(w - 1, h - 1, params.mesh_pitch, params.intra_stiffness)
        for _ in stack.sections
    ]
    log.info(
        "registration: %d sections at %dx%d, %d lattice vertices each",
        len(meshes),
        w,
        h,
        meshes[0].n_vertices,
    )

    pairs = []
    for i in range(len(stack.sections) - 1):
        pairs.append((i, i + 1))
        pairs.append((i + 1, i))

    def run_pair(pair: tuple[int, int]) -> list[BlockMatch]:
        si, sj = pair
        return block_match(grays[si], grays[sj], meshes[si], params, masks[si])

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        match_lists = list(pool.map(run_pair, pairs))
    pair_matches = [(si, sj, m) for (si, sj), m in zip(pairs, match_lists)]
    n_acc = sum(sum(m.accepted for m in ml) for _, _, ml in pair_matches)
    log.info("matching round 1: %d accepted (%.1fs)", n_acc, time.time() - t0)

    # second round with rigid compensation removes the rotation bias of
    # translation-only NCC between mutually rotated sections
    rigids = _pair_rigid_estimates(len(stack.sections), pair_matches)

    # after rigid compensation the residual motion is elastic-scale, so the
    # second round scans a tight window (also removes far-field aliases)
    refine_params = replace(
        params, search_radius=max(12, params.search_radius // 3)
    )

    def run_pair_refined(pair: tuple[int, int]) -> list[BlockMatch]:
        si, sj = pair
        return block_match(
            grays[si],
            grays[sj],
            meshes[si],
            refine_params,
            masks[si],
            prior_rigid=rigids[pair],
            subpixel=True,
        )

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        match_lists = list(pool.map(run_pair_refined, pairs))
    pair_matches = [(si, sj, m) for (si, sj), m in zip(pairs, match_lists)]

    # The 2x-pitch consensus window is too coarse to catch isolated aliased
    # matches; drop matches grossly inconsistent with their pair's rigid fit
    # before they become springs.
    for si, sj, ml in pair_matches:
        acc = [m for m in ml if m.accepted]
        if len(acc) < 4:
            continue
        src = np.asarray([m.source_pos for m in acc])
        dst = np.asarray([m.target_pos for m in acc])
        r, t, _ = _trimmed_kabsch(src, dst)
        resid = np.linalg.norm(dst - (src @ r.T + t), axis=1)
        thresh = max(4.0 * float(np.median(resid)), 8.0)
        for m, rr in zip(acc, resid):
            if rr > thresh:
                m.accepted = False
    n_acc = sum(sum(m.accepted for m in ml) for _, _, ml in pair_matches)
    log.info("matching round 2: %d accepted (%.1fs)", n_acc, time.time() - t0)

    cross: list[CrossSpring] = []
    for si, sj, ml in pair_matches:
        cross.extend(_attach_cross_springs(meshes, si, sj, ml, params.cross_stiffness))

    meshes[0].fixed[:] = True
    _chain_init(meshes, pair_matches)

    trace = relax(
        meshes,
        cross,
        step_size=params.step_size,
        max_iters=params.max_iters,
        converge_eps=params.converge_eps,
    )
    log.info(
        "relaxation: %d iterations, energy %.4g -> %.4g (%.1fs)",
        len(trace),
        trace[0] if trace else 0.0,
        trace[-1] if trace else 0.0,
        time.time() - t0,
    )

    transforms = []
    for mesh in meshes:
        t = extract_transform(mesh)
        transforms.append(t.scaled(1.0 / scale) if scale != 1.0 else t)

    out_sections = []
    for s, t in zip(stack.sections, transforms):
        src_x, src_y, valid = inverse_sample_maps(t, s.shape)
        image = (
            _sample(s.image, src_x, src_y, valid, "bilinear")
            if s.image is not None
            else None
        )
        tissue = _sample(s.tissue_mask, src_x, src_y, valid, "nearest")
        tumors = [
            (tid, _sample(m, src_x, src_y, valid, "nearest")) for tid, m in s.tumor_masks
        ]
        out_sections.append(
            Section(index=s.index, tissue_mask=tissue, image=image, tumor_masks=tumors)
        )
    log.info("warping done (%.1fs total)", time.time() - t0)

    out = SectionStack(metadata=stack.metadata, sections=out_sections, registered=True)
    return RegistrationResult(
        stack=out, transforms=transforms, energy_trace=trace, matches=pair_matches
    )


def write_diagnostics(result: RegistrationResult, out_dir: Path | str) -> None:
    """energy_trace.csv and matches.csv alongside the registered stack."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "energy_trace.csv", "w", newline="") as fh:
        fh.write("iteration,total_energy\n")
        for i, e in enumerate(result.energy_trace):
            fh.write(f"{i},{e!r}\n")
    with open(out / "matches.csv", "w", newline="") as fh:
        fh.write("section,target_section,vx,vy,dx,dy,score,accepted\n")
        for si, sj, ml in result.matches:
            for m in ml:
                d = m.offset
                fh.write(
                    f"{si},{sj},{m.source_pos[0]:.1f},{m.source_pos[1]:.1f},"
                    f"{d[0]:.1f},{d[1]:.1f},{m.score:.6f},{int(m.accepted)}\n"
                )


def save_registered(result: RegistrationResult, root: Path | str) -> None:
    """Write the registered stack under <root>/registered/ with diagnostics."""
    out = Path(root) / "registered"
    save_stack(result.stack, out)
    write_diagnostics(result, out)
