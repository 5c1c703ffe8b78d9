"""Serial-section stack I/O: loading, validation, downscaling, physical units.

A stack on disk is a directory with per-section PNGs and one metadata file:

    <root>/stack.json
    <root>/sections/<index:04>.png        RGB section image
    <root>/masks/tissue/<index:04>.png    8-bit mask, foreground >= 128
    <root>/masks/tumor/<tumor_id>/<index:04>.png

Masks are binarized at 128 on load. All physical-unit bookkeeping
(micrometers per pixel, section spacing) lives in StackMetadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "StackMetadata",
    "Section",
    "SectionStack",
    "load_stack",
    "save_stack",
    "downscale_mask",
    "z_spacing_px",
]


class StackError(ValueError):
    """Raised for malformed stacks: missing masks, dimension mismatches."""


@dataclass(frozen=True)
class StackMetadata:
    """Physical and structural metadata shared by every section of a stack."""

    pixel_size_um: float
    section_spacing_um: float
    section_thickness_um: float
    n_sections: int
    downscale_fraction: float

    def __post_init__(self):
        if not (self.pixel_size_um > 0):
            raise ValueError(f"pixel_size_um must be > 0, got {self.pixel_size_um}")
        if not (self.section_spacing_um > 0):
            raise ValueError(
                f"section_spacing_um must be > 0, got {self.section_spacing_um}"
            )
        if self.n_sections < 2:
            raise ValueError(f"n_sections must be >= 2, got {self.n_sections}")
        if not (0 < self.downscale_fraction <= 1):
            raise ValueError(
                f"downscale_fraction must be in (0, 1], got {self.downscale_fraction}"
            )
        z = self.section_spacing_um / self.pixel_size_um
        if not np.isfinite(z) or z <= 0:
            raise ValueError(f"z spacing in pixels is degenerate: {z}")

    @classmethod
    def from_json(cls, path: Path | str) -> "StackMetadata":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            pixel_size_um=float(raw["pixel_size_um"]),
            section_spacing_um=float(raw["section_spacing_um"]),
            section_thickness_um=float(raw["section_thickness_um"]),
            n_sections=int(raw["n_sections"]),
            downscale_fraction=float(raw["downscale_fraction"]),
        )

    def to_json(self, path: Path | str) -> None:
        payload = {
            "pixel_size_um": self.pixel_size_um,
            "section_spacing_um": self.section_spacing_um,
            "section_thickness_um": self.section_thickness_um,
            "n_sections": self.n_sections,
            "downscale_fraction": self.downscale_fraction,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class Section:
    """One z-slice: optional RGB image, binary tissue mask, per-tumor masks."""

    index: int
    tissue_mask: np.ndarray
    image: np.ndarray | None = None
    tumor_masks: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        shape = self.tissue_mask.shape[:2]
        if self.image is not None and self.image.shape[:2] != shape:
            raise StackError(
                f"section {self.index}: image {self.image.shape[:2]} vs "
                f"tissue mask {shape}"
            )
        for tid, m in self.tumor_masks:
            if m.shape[:2] != shape:
                raise StackError(
                    f"section {self.index}: tumor mask {tid!r} {m.shape[:2]} vs "
                    f"tissue mask {shape}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.tissue_mask.shape[:2]


@dataclass
class SectionStack:
    metadata: StackMetadata
    sections: list[Section]
    registered: bool = False

    def __post_init__(self):
        indices = [s.index for s in self.sections]
        if indices != list(range(len(self.sections))):
            raise StackError(f"section indices not contiguous from 0: {indices}")

    @property
    def tumor_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.sections:
            for tid, _ in s.tumor_masks:
                seen.setdefault(tid)
        return list(seen)

    def tumor_mask_by_section(self, tumor_id: str) -> list[np.ndarray | None]:
        """Per-section mask for one tumor, None where the tumor is absent."""
        out: list[np.ndarray | None] = []
        for s in self.sections:
            found = None
            for tid, m in s.tumor_masks:
                if tid == tumor_id:
                    found = m
                    break
            out.append(found)
        return out


def _read_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def _read_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def load_stack(root_path: Path | str, metadata: StackMetadata | None = None) -> SectionStack:
    """Load a section stack from the documented directory layout.

    Missing section images are tolerated (mask-only stages); a missing
    tissue mask is a hard error naming the offending index.
    """
    root = Path(root_path)
    if metadata is None:
        metadata = StackMetadata.from_json(root / "stack.json")

    tumor_root = root / "masks" / "tumor"
    tumor_ids = (
        sorted(p.name for p in tumor_root.iterdir() if p.is_dir())
        if tumor_root.is_dir()
        else []
    )

    sections = []
    for i in range(metadata.n_sections):
        name = f"{i:04d}.png"
        tissue_path = root / "masks" / "tissue" / name
        if not tissue_path.exists():
            raise StackError(f"tissue mask absent: {i}")
        tissue = _read_mask(tissue_path)

        image_path = root / "sections" / name
        image = _read_image(image_path) if image_path.exists() else None

        tumors = []
        for tid in tumor_ids:
            tpath = tumor_root / tid / name
            if tpath.exists():
                tumors.append((tid, _read_mask(tpath)))
        sections.append(Section(index=i, tissue_mask=tissue, image=image, tumor_masks=tumors))

    return SectionStack(metadata=metadata, sections=sections)


def save_stack(stack: SectionStack, root_path: Path | str) -> None:
    """Write a stack back to disk in the canonical layout (round-trips masks)."""
    root = Path(root_path)
    (root / "sections").mkdir(parents=True, exist_ok=True)
    (root / "masks" / "tissue").mkdir(parents=True, exist_ok=True)
    stack.metadata.to_json(root / "stack.json")
    for s in stack.sections:
        name = f"{s.index:04d}.png"
        if s.image is not None:
            Image.fromarray(s.image.astype(np.uint8), "RGB").save(root / "sections" / name)
        Image.fromarray((s.tissue_mask.astype(np.uint8)) * 255, "L").save(
            root / "masks" / "tissue" / name
        )
        for tid, m in s.tumor_masks:
            tdir = root / "masks" / "tumor" / tid
            tdir.mkdir(parents=True, exist_ok=True)
            Image.fromarray((m.astype(np.uint8)) * 255, "L").save(tdir / name)


def downscale_mask(mask: np.ndarray, fraction: float) -> np.ndarray:
    """Downscale a binary mask by area-majority voting.

    Output dims = round(input dims * fraction). An output pixel is foreground
    iff at least 50% of the input area it covers is foreground. Exact for
    fractional pixel boundaries (computed on the integral image); identity at
    fraction 1.0.
    """
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    oh = max(1, round(h * fraction))
    ow = max(1, round(w * fraction))
    if (oh, ow) == (h, w):
        return mask.copy()

    # Integral image is piecewise bilinear between integer nodes, so linear
    # interpolation at fractional cell edges gives exact covered-area sums.
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(mask, axis=0), axis=1, out=integral[1:, 1:])

    ys = np.linspace(0.0, h, oh + 1)
    xs = np.linspace(0.0, w, ow + 1)

    def interp_rows(edges: np.ndarray, table: np.ndarray) -> np.ndarray:
        lo = np.clip(np.floor(edges).astype(int), 0, table.shape[0] - 1)
        hi = np.clip(lo + 1, 0, table.shape[0] - 1)
        t = edges - lo
        return table[lo] * (1 - t[:, None]) + table[hi] * t[:, None]

    at_y = interp_rows(ys, integral)  # (oh+1, w+1)
    lo = np.clip(np.floor(xs).astype(int), 0, w)
    hi = np.clip(lo + 1, 0, w)
    t = xs - lo
    at_yx = at_y[:, lo] * (1 - t) + at_y[:, hi] * t  # (oh+1, ow+1)

    covered = at_yx[1:, 1:] - at_yx[:-1, 1:] - at_yx[1:, :-1] + at_yx[:-1, :-1]
    cell_area = (h / oh) * (w / ow)
    return covered >= 0.5 * cell_area - 1e-9


def z_spacing_px(metadata: StackMetadata, at_fraction: float = 1.0) -> float:
    """Section spacing expressed in pixels of the raster at `at_fraction` scale."""
    return metadata.section_spacing_um / (metadata.pixel_size_um / at_fraction)
