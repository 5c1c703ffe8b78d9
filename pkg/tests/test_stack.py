import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histo3d.stack import (
    SectionStack,
    Section,
    StackMetadata,
    StackError,
    downscale_mask,
    load_stack,
    save_stack,
    z_spacing_px,
)


def metadata(n=3, pixel=0.46, spacing=50.0, fraction=0.05):
    return StackMetadata(
        pixel_size_um=pixel,
        section_spacing_um=spacing,
        section_thickness_um=5.0,
        n_sections=n,
        downscale_fraction=fraction,
    )


class TestMetadata:
    def test_rejects_nonpositive_pixel_size(self):
        with pytest.raises(ValueError):
            metadata(pixel=0.0)

    def test_rejects_single_section(self):
        with pytest.raises(ValueError):
            metadata(n=1)

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            metadata(fraction=1.5)


class TestZSpacing:
    def test_wsi_acquisition_constants_full_resolution(self):
        md = metadata(pixel=0.46, spacing=50.0)
        assert z_spacing_px(md, 1.0) == pytest.approx(108.70, abs=0.01)

    def test_at_five_percent(self):
        md = metadata(pixel=0.46, spacing=50.0)
        assert z_spacing_px(md, 0.05) == pytest.approx(5.435, abs=0.001)

    def test_unit_case(self):
        md = metadata(pixel=1.0, spacing=1.0)
        assert z_spacing_px(md, 1.0) == 1.0


class TestDownscaleMask:
    def test_all_ones_five_percent(self):
        mask = np.ones((1000, 1000), dtype=bool)
        out = downscale_mask(mask, 0.05)
        assert out.shape == (50, 50)
        assert out.all()

    def test_checkerboard_majority_matches_brute_force(self):
        # 100x100 checkerboard of 20x20 blocks at 5% -> 5x5 output, one
        # output pixel per block
        yy, xx = np.mgrid[0:100, 0:100]
        mask = ((yy // 20) + (xx // 20)) % 2 == 0
        out = downscale_mask(mask, 0.05)
        assert out.shape == (5, 5)
        brute = np.zeros((5, 5), dtype=bool)
        for r in range(5):
            for c in range(5):
                block = mask[r * 20 : (r + 1) * 20, c * 20 : (c + 1) * 20]
                brute[r, c] = block.sum() >= block.size / 2
        assert np.array_equal(out, brute)

    def test_fraction_one_is_identity(self):
        rng = np.random.default_rng(0)
        mask = rng.random((37, 53)) > 0.5
        assert np.array_equal(downscale_mask(mask, 1.0), mask)

    def test_rejects_out_of_range_fraction(self):
        with pytest.raises(ValueError):
            downscale_mask(np.ones((4, 4), bool), 0.0)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 0.1]))
    @settings(max_examples=25, deadline=None)
    def test_area_roughly_preserved_for_fat_shapes(self, seed, fraction):
        # a disk of diameter well above 2/fraction keeps its area within 20%
        rng = np.random.default_rng(seed)
        h = w = 120
        r = rng.uniform(3.0 / fraction, w / 2 - 4)
        cy, cx = rng.uniform(r + 1, h - r - 1), rng.uniform(r + 1, w - r - 1)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        out = downscale_mask(mask, fraction)
        ratio = out.sum() / (fraction**2 * mask.sum())
        assert 0.8 <= ratio <= 1.2


def _stack_on_disk(tmp_path, n=3, with_tumors=True):
    rng = np.random.default_rng(1)
    sections = []
    for i in range(n):
        tissue = rng.random((40, 30)) > 0.4
        tumors = []
        if with_tumors:
            tumor = tissue & (rng.random((40, 30)) > 0.7)
            if tumor.any():
                tumors.append(("t1", tumor))
        img = (rng.random((40, 30, 3)) * 255).astype(np.uint8)
        sections.append(
            Section(index=i, tissue_mask=tissue, image=img, tumor_masks=tumors)
        )
    stack = SectionStack(metadata=metadata(n=n), sections=sections)
    save_stack(stack, tmp_path)
    return stack


class TestLoadStack:
    def test_round_trip_masks_bit_exact(self, tmp_path):
        stack = _stack_on_disk(tmp_path)
        loaded = load_stack(tmp_path)
        assert len(loaded.sections) == len(stack.sections)
        for a, b in zip(stack.sections, loaded.sections):
            assert np.array_equal(a.tissue_mask, b.tissue_mask)
            assert np.array_equal(a.image, b.image)
            assert [t for t, _ in a.tumor_masks] == [t for t, _ in b.tumor_masks]
            for (_, ma), (_, mb) in zip(a.tumor_masks, b.tumor_masks):
                assert np.array_equal(ma, mb)

    def test_no_tumors_yields_empty_lists(self, tmp_path):
        _stack_on_disk(tmp_path, n=2, with_tumors=False)
        loaded = load_stack(tmp_path)
        assert all(s.tumor_masks == [] for s in loaded.sections)

    def test_missing_tissue_mask_names_index(self, tmp_path):
        _stack_on_disk(tmp_path)
        (tmp_path / "masks" / "tissue" / "0001.png").unlink()
        with pytest.raises(StackError, match="tissue mask absent: 1"):
            load_stack(tmp_path)

    def test_dimension_mismatch_is_hard_error(self):
        with pytest.raises(StackError, match="tumor mask"):
            Section(
                index=0,
                tissue_mask=np.ones((10, 10), bool),
                tumor_masks=[("t", np.ones((9, 10), bool))],
            )

    def test_indices_must_be_contiguous(self):
        with pytest.raises(StackError):
            SectionStack(
                metadata=metadata(n=2),
                sections=[Section(index=1, tissue_mask=np.ones((4, 4), bool))],
            )
