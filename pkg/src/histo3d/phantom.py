"""Synthetic serial-section phantoms with known ground truth.

Renders an ellipsoid organ as a stack of textured pseudo-histology sections
(multi-octave value noise shared across the stack plus planted nucleus
disks), embeds ellipsoidal tumors, and applies a seeded per-section rigid +
smooth elastic jitter. The jitter is defined directly as the exact
observed-to-true coordinate map used for rendering, so every landmark's
ground-truth target is exact, not approximated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .stack import Section, SectionStack, StackMetadata, save_stack

__all__ = ["PhantomSpec", "TumorSpec", "generate_phantom"]


@dataclass(frozen=True)
class TumorSpec:
    tumor_id: str
    center: tuple[float, float, float]  # x px, y px, z in section units
    semi_axes: tuple[float, float, float]  # rx px, ry px, rz in section units


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 1000
    height: int = 1000
    n_sections: int = 30
    pixel_size_um: float = 4.6
    section_spacing_um: float = 50.0
    section_thickness_um: float = 5.0
    downscale_fraction: float = 0.25
    organ_semi_axes: tuple[float, float] = (300.0, 240.0)
    organ_z_semi: float = 18.0  # in section units; > stack half-span keeps ends open
    tumors: tuple[TumorSpec, ...] = ()
    max_translation: float = 10.0
    max_rotation_deg: float = 5.0
    elastic_max: float = 5.0
    elastic_cells: int = 5
    nucleus_count: int = 1600
    nucleus_radius: tuple[float, float] = (4.0, 7.0)
    landmark_grid_step: int = 100
    jitter_first_section: bool = False  # anchor section stays clean for scoring

    @classmethod
    def from_json(cls, path: Path | str) -> "PhantomSpec":
        with open(path) as fh:
            raw = json.load(fh)
        tumors = tuple(
            TumorSpec(
                tumor_id=str(t["tumor_id"]),
                center=tuple(t["center"]),
                semi_axes=tuple(t["semi_axes"]),
            )
            for t in raw.pop("tumors", [])
        )
        known = {f for f in cls.__dataclass_fields__ if f != "tumors"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
        return cls(tumors=tumors, **kwargs)

    @property
    def organ_center(self) -> tuple[float, float, float]:
        return (self.width / 2.0, self.height / 2.0, (self.n_sections - 1) / 2.0)


def _check_tumors(spec: PhantomSpec) -> None:
    """Reject overlapping tumor placements (coarse voxel sampling)."""
    if len(spec.tumors) < 2:
        return
    step = 4.0
    occ: dict[str, set] = {}
    for t in spec.tumors:
        cx, cy, cz = t.center
        rx, ry, rz = t.semi_axes
        xs = np.arange(cx - rx, cx + rx + step, step)
        ys = np.arange(cy - ry, cy + ry + step, step)
        zs = np.arange(np.floor(cz - rz), np.ceil(cz + rz) + 1)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        inside = (
            ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 + ((gz - cz) / rz) ** 2
        ) <= 1.0
        cells = {
            (int(x // step), int(y // step), int(z))
            for x, y, z in zip(gx[inside], gy[inside], gz[inside])
        }
        occ[t.tumor_id] = cells
    ids = [t.tumor_id for t in spec.tumors]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if occ[ids[i]] & occ[ids[j]]:
                raise ValueError(f"tumor specs overlap: {ids[i]} and {ids[j]}")


class _ValueNoise:
    """Seeded multi-octave value noise, bilinearly sampled at float coords."""

    def __init__(self, rng: np.random.Generator, shape: tuple[int, int]):
        self.scales = (5.0, 16.0, 64.0, 192.0)
        self.weights = (0.18, 0.22, 0.28, 0.32)
        h, w = shape
        self.grids = [
            rng.random((int(h / s) + 3, int(w / s) + 3)) for s in self.scales
        ]

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        for grid, s, wgt in zip(self.grids, self.scales, self.weights):
            coords = np.array([y / s + 1.0, x / s + 1.0])
            out += wgt * map_coordinates(grid, coords, order=1, mode="nearest")
        return out


def jitter_from_dict(d: dict) -> "_Jitter":
    """Rebuild a ground-truth jitter map exported in ground_truth.json."""
    return _Jitter(
        rot_inv=np.asarray(d["rot_inv"]),
        translation=np.asarray(d["translation"]),
        center=np.asarray(d["center"]),
        elastic_grid=np.asarray(d["elastic_grid"]),
        cell=float(d["cell"]),
    )


@dataclass
class _Jitter:
    """Exact observed -> true map: rigid inverse after elastic correction."""

    rot_inv: np.ndarray  # (2, 2)
    translation: np.ndarray  # (2,)
    center: np.ndarray  # (2,)
    elastic_grid: np.ndarray  # (2, gh, gw) displacement control points
    cell: float

    def apply(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coords = np.array([y / self.cell + 0.0, x / self.cell + 0.0])
        ex = map_coordinates(self.elastic_grid[0], coords, order=1, mode="nearest")
        ey = map_coordinates(self.elastic_grid[1], coords, order=1, mode="nearest")
        px = x - ex - self.translation[0] - self.center[0]
        py = y - ey - self.translation[1] - self.center[1]
        tx = self.rot_inv[0, 0] * px + self.rot_inv[0, 1] * py + self.center[0]
        ty = self.rot_inv[1, 0] * px + self.rot_inv[1, 1] * py + self.center[1]
        return tx, ty


def _make_jitter(spec: PhantomSpec, rng: np.random.Generator, active: bool) -> _Jitter:
    gh = gw = spec.elastic_cells
    if active:
        theta = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        t = rng.uniform(-spec.max_translation / np.sqrt(2), spec.max_translation / np.sqrt(2), 2)
        grid = rng.uniform(-spec.elastic_max, spec.elastic_max, (2, gh, gw))
    else:
        theta = 0.0
        t = np.zeros(2)
        grid = np.zeros((2, gh, gw))
    c, s = np.cos(theta), np.sin(theta)
    rot_inv = np.array([[c, s], [-s, c]])  # inverse of R(theta)
    cell = max(spec.width, spec.height) / (gh - 1)
    return _Jitter(
        rot_inv=rot_inv,
        translation=t,
        center=np.array([spec.width / 2.0, spec.height / 2.0]),
        elastic_grid=grid,
        cell=cell,
    )


def _section_axes(spec: PhantomSpec, i: int) -> tuple[float, float] | None:
    _, _, zc = spec.organ_center
    frac = 1.0 - ((i - zc) / spec.organ_z_semi) ** 2
    if frac <= 0:
        return None
    s = np.sqrt(frac)
    return spec.organ_semi_axes[0] * s, spec.organ_semi_axes[1] * s


def _tumor_radii(t: TumorSpec, i: int) -> tuple[float, float] | None:
    frac = 1.0 - ((i - t.center[2]) / t.semi_axes[2]) ** 2
    if frac <= 0:
        return None
    s = np.sqrt(frac)
    return t.semi_axes[0] * s, t.semi_axes[1] * s


def _paint_disks(
    img: np.ndarray, centers: np.ndarray, radii: np.ndarray, color: np.ndarray
) -> None:
    h, w = img.shape[:2]
    for (cx, cy), r in zip(centers, radii):
        x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
        y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[y0:y1, x0:x1][inside] = color


def generate_phantom(
    spec: PhantomSpec, seed: int, out_dir: Path | str
) -> tuple[SectionStack, dict]:
    """Render the phantom stack to disk; returns (stack, ground_truth).

    Deterministic per (spec, seed): rerunning writes bit-identical files.
    Ground truth holds, per section, observed landmark positions with their
    exact true-frame targets, plus the organ/tumor geometry in native
    coordinates.
    """
    _check_tumors(spec)
    rng = np.random.default_rng(seed)
    w, h, n = spec.width, spec.height, spec.n_sections
    cx, cy, zc = spec.organ_center

    noise = _ValueNoise(rng, (h, w))

    # shared nuclei persist across sections; extras are per-section
    base_pts = []
    a0, b0 = spec.organ_semi_axes
    while len(base_pts) < spec.nucleus_count:
        cand = rng.uniform(0, [w, h], (spec.nucleus_count, 2))
        keep = ((cand[:, 0] - cx) / a0) ** 2 + ((cand[:, 1] - cy) / b0) ** 2 <= 1.0
        base_pts.extend(cand[keep].tolist())
    base_pts = np.asarray(base_pts[: spec.nucleus_count])
    base_radii = rng.uniform(*spec.nucleus_radius, len(base_pts))

    jitters = [
        _make_jitter(spec, rng, active=(i > 0 or spec.jitter_first_section))
        for i in range(n)
    ]

    # per-section extra nuclei (30% of base count) and tumor-interior nuclei
    extras = []
    for i in range(n):
        k = spec.nucleus_count // 3
        pts = rng.uniform(0, [w, h], (k, 2))
        radii = rng.uniform(*spec.nucleus_radius, k)
        extras.append((pts, radii))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    sections = []
    landmarks = []
    step = spec.landmark_grid_step
    gy, gx = np.mgrid[step // 2 : h : step, step // 2 : w : step]
    grid_pts = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)

    for i in range(n):
        axes = _section_axes(spec, i)
        true_img = np.empty((h, w, 3), dtype=np.uint8)
        tex = noise.sample(xx, yy)

        glass = np.clip(246 + (tex - 0.5) * 6, 0, 255)
        true_img[..., 0] = glass
        true_img[..., 1] = np.clip(glass - 2, 0, 255)
        true_img[..., 2] = glass

        if axes is not None:
            ax, by = axes
            tissue_true = ((xx - cx) / ax) ** 2 + ((yy - cy) / by) ** 2 <= 1.0
            base = np.stack(
                [
                    np.clip(222 + (tex - 0.5) * 60, 0, 255),
                    np.clip(150 + (tex - 0.5) * 70, 0, 255),
                    np.clip(192 + (tex - 0.5) * 60, 0, 255),
                ],
                axis=-1,
            )
            true_img[tissue_true] = base[tissue_true].astype(np.uint8)
            for t in spec.tumors:
                rr = _tumor_radii(t, i)
                if rr is None:
                    continue
                tin = ((xx - t.center[0]) / rr[0]) ** 2 + (
                    (yy - t.center[1]) / rr[1]
                ) ** 2 <= 1.0
                tint = base.copy()
                tint[..., 0] = np.clip(tint[..., 0] - 14, 0, 255)
                tint[..., 1] = np.clip(tint[..., 1] - 16, 0, 255)
                true_img[tin] = tint[tin].astype(np.uint8)

            nucleus_color = np.array([72, 48, 132], dtype=np.uint8)
            in_organ = ((base_pts[:, 0] - cx) / ax) ** 2 + (
                (base_pts[:, 1] - cy) / by
            ) ** 2 <= 1.0
            _paint_disks(true_img, base_pts[in_organ], base_radii[in_organ], nucleus_color)
            epts, eradii = extras[i]
            in_organ = ((epts[:, 0] - cx) / ax) ** 2 + ((epts[:, 1] - cy) / by) ** 2 <= 1.0
            _paint_disks(true_img, epts[in_organ], eradii[in_organ], nucleus_color)

        jit = jitters[i]
        tx, ty = jit.apply(xx, yy)
        obs_img = np.empty_like(true_img)
        for ch in range(3):
            obs_img[..., ch] = np.clip(
                map_coordinates(
                    true_img[..., ch].astype(np.float64),
                    np.array([ty, tx]),
                    order=1,
                    mode="nearest",
                ),
                0,
                255,
            ).astype(np.uint8)

        if axes is not None:
            ax, by = axes
            tissue_obs = ((tx - cx) / ax) ** 2 + ((ty - cy) / by) ** 2 <= 1.0
        else:
            tissue_obs = np.zeros((h, w), dtype=bool)

        tumor_masks = []
        for t in spec.tumors:
            rr = _tumor_radii(t, i)
            if rr is None:
                continue
            tmask = ((tx - t.center[0]) / rr[0]) ** 2 + (
                (ty - t.center[1]) / rr[1]
            ) ** 2 <= 1.0
            tmask &= tissue_obs
            if tmask.any():
                tumor_masks.append((t.tumor_id, tmask))

        sections.append(
            Section(index=i, tissue_mask=tissue_obs, image=obs_img, tumor_masks=tumor_masks)
        )

        if axes is not None:
            ltx, lty = jit.apply(grid_pts[:, 0], grid_pts[:, 1])
            well_inside = ((ltx - cx) / (0.85 * axes[0])) ** 2 + (
                (lty - cy) / (0.85 * axes[1])
            ) ** 2 <= 1.0
            for (ox, oy), wtx, wty, ok in zip(grid_pts, ltx, lty, well_inside):
                if ok:
                    landmarks.append(
                        {
                            "section": i,
                            "observed": [float(ox), float(oy)],
                            "true": [float(wtx), float(wty)],
                        }
                    )

    metadata = StackMetadata(
        pixel_size_um=spec.pixel_size_um,
        section_spacing_um=spec.section_spacing_um,
        section_thickness_um=spec.section_thickness_um,
        n_sections=n,
        downscale_fraction=spec.downscale_fraction,
    )
    stack = SectionStack(metadata=metadata, sections=sections)

    ground_truth = {
        "seed": seed,
        "jitter_maps": [
            {
                "rot_inv": j.rot_inv.tolist(),
                "translation": j.translation.tolist(),
                "center": j.center.tolist(),
                "elastic_grid": j.elastic_grid.tolist(),
                "cell": j.cell,
            }
            for j in jitters
        ],
        "organ": {
            "center": [cx, cy, zc],
            "semi_axes": [spec.organ_semi_axes[0], spec.organ_semi_axes[1], spec.organ_z_semi],
        },
        "tumors": [
            {"tumor_id": t.tumor_id, "center": list(t.center), "semi_axes": list(t.semi_axes)}
            for t in spec.tumors
        ],
        "jitter": {
            "max_translation": spec.max_translation,
            "max_rotation_deg": spec.max_rotation_deg,
            "elastic_max": spec.elastic_max,
        },
        "landmarks": landmarks,
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_stack(stack, out)
    with open(out / "ground_truth.json", "w") as fh:
        json.dump(ground_truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stack, ground_truth
