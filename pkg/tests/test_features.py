import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histo3d.features import (
    FeatureInstance,
    FeatureTable,
    LBP_FLAT_BIN,
    PositionMapper,
    all_feature_values,
    feature_vector,
    normalize_and_index,
    percentile_threshold,
    read_feature_csv,
    tile_patches,
    write_feature_csv,
)
from histo3d.meshing import GeometryReport
from histo3d.stack import Section


def wide_report():
    lo = np.array([-1e4, -1e4, -1e4])
    hi = np.array([1e4, 1e4, 1e4])
    return GeometryReport(
        bbox_min=lo, bbox_max=hi, extents=hi - lo, center=(lo + hi) / 2,
        vertex_count=0, triangle_count=0,
    )


IDENTITY_MAPPER = PositionMapper(
    fraction=1.0, z_spacing=1.0, scale_axis=np.ones(3), offset=np.zeros(3)
)


def table_from_values(values):
    insts = [
        FeatureInstance(index=k, section=0, center_xy=(float(k), 0.0), value=float(v))
        for k, v in enumerate(values)
    ]
    return FeatureTable(feature_name="t", instances=insts)


def processed(values):
    [t] = normalize_and_index([table_from_values(values)], wide_report(), IDENTITY_MAPPER)
    return t


class TestTilePatches:
    def test_exact_grid(self):
        sec = Section(index=0, tissue_mask=np.ones((1200, 800), dtype=bool))
        grid, cells = tile_patches(sec, 400, min_tissue_fraction=0.25)
        assert (grid.rows, grid.cols) == (3, 2)
        assert len(cells) == 6

    def test_all_background_emits_nothing(self):
        sec = Section(index=0, tissue_mask=np.zeros((800, 800), dtype=bool))
        grid, cells = tile_patches(sec, 400)
        assert cells == []
        assert (grid.rows, grid.cols) == (2, 2)

    def test_coverage_matches_brute_force(self):
        rng = np.random.default_rng(0)
        mask = rng.random((800, 800)) > 0.5
        mask[:, :400] = False  # left half glass
        sec = Section(index=0, tissue_mask=mask)
        grid, cells = tile_patches(sec, 200, min_tissue_fraction=0.25)
        brute = 0
        for r in range(4):
            for c in range(4):
                block = mask[r * 200 : (r + 1) * 200, c * 200 : (c + 1) * 200]
                if block.mean() >= 0.25:
                    brute += 1
        assert len(cells) == brute

    def test_patch_larger_than_raster_errors(self):
        sec = Section(index=0, tissue_mask=np.ones((100, 100), dtype=bool))
        with pytest.raises(ValueError):
            tile_patches(sec, 400)

    def test_indices_pure_function_of_cell(self):
        sec5 = Section(index=5, tissue_mask=np.ones((800, 800), dtype=bool))
        grid, cells = tile_patches(sec5, 400)
        assert [i for i, _, _ in cells] == [5 * 4 + r * 2 + c for r in range(2) for c in range(2)]


def constant_patch(value=128):
    return np.full((100, 100, 3), value, dtype=np.uint8)


class TestFeatureKinds:
    def test_constant_patch_degenerate_values(self):
        p = constant_patch()
        assert feature_vector(p, "glcm_energy")["glcm_energy"] == 1.0
        assert feature_vector(p, "intensity")["intensity_std"] == 0.0
        lbp = feature_vector(p, "lbp")
        assert lbp[f"lbp_{LBP_FLAT_BIN}"] == pytest.approx(1.0)

    def test_lbp_histogram_sums_to_one(self):
        rng = np.random.default_rng(1)
        p = (rng.random((100, 100, 3)) * 255).astype(np.uint8)
        lbp = feature_vector(p, "lbp")
        assert sum(lbp.values()) == pytest.approx(1.0, abs=1e-9)

    def test_vertical_edge_concentrates_hog_in_horizontal_bin(self):
        p = np.zeros((90, 90, 3), dtype=np.uint8)
        p[:, 45:] = 255
        hog = feature_vector(p, "hog")
        bins = np.array([hog[f"hog_{k}"] for k in range(9)])
        assert bins.argmax() == 0
        assert bins[0] > 0.9 * bins.sum()

    def test_hog_bins_nonnegative(self):
        rng = np.random.default_rng(2)
        p = (rng.random((120, 120, 3)) * 255).astype(np.uint8)
        hog = feature_vector(p, "hog")
        assert all(v >= 0 for v in hog.values())

    def test_glcm_energy_in_unit_interval(self):
        rng = np.random.default_rng(3)
        p = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
        e = feature_vector(p, "glcm_energy")["glcm_energy"]
        assert 0 < e <= 1

    def test_twelve_planted_nuclei_counted(self):
        p = np.zeros((400, 400, 3), dtype=np.uint8)
        p[:, :] = (235, 170, 200)  # eosin-ish background
        yy, xx = np.mgrid[0:400, 0:400]
        r = 7.98  # area ~200 px^2
        centers = [(40 + 100 * i, 40 + 100 * j) for i in range(4) for j in range(3)]
        for cy, cx in centers:
            p[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = (70, 48, 130)
        n = feature_vector(p, "nuclei")
        assert n["nuclei_count"] == 12.0
        assert n["nuclei_nn_mean"] == pytest.approx(100.0, abs=1.0)

    def test_constant_shift_invariance_lbp_hog(self):
        rng = np.random.default_rng(4)
        base = (rng.random((90, 90)) * 200).astype(np.float64)
        a = np.dstack([base] * 3).astype(np.uint8)
        b = np.dstack([base + 30] * 3).astype(np.uint8)
        assert feature_vector(a, "lbp") == feature_vector(b, "lbp")
        ha, hb = feature_vector(a, "hog"), feature_vector(b, "hog")
        for k in ha:
            assert ha[k] == pytest.approx(hb[k], abs=1e-12)

    def test_glcm_invariant_when_quantization_bins_preserved(self):
        # values 16 and 48 sit mid-bin; +2 keeps every pixel's 32-level bin
        rng = np.random.default_rng(5)
        base = np.where(rng.random((64, 64)) > 0.5, 16, 48).astype(np.uint8)
        a = np.dstack([base] * 3)
        b = np.dstack([base + 2] * 3)
        ea = feature_vector(a, "glcm_energy")["glcm_energy"]
        eb = feature_vector(b, "glcm_energy")["glcm_energy"]
        assert ea == pytest.approx(eb, abs=1e-12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            feature_vector(constant_patch(), "wavelet")


class TestNormalizeAndIndex:
    def test_two_values(self):
        t = processed([1.0, 3.0])
        assert [i.normalized for i in t.instances] == [0.0, 1.0]
        assert [i.percentile_rank for i in t.instances] == [25.0, 75.0]

    def test_all_equal_convention(self):
        t = processed([5.0] * 7)
        assert {i.normalized for i in t.instances} == {0.0}
        assert {i.percentile_rank for i in t.instances} == {50.0}

    def test_normalized_is_monotone_in_value(self):
        rng = np.random.default_rng(6)
        vals = rng.random(50)
        t = processed(vals)
        order_v = np.argsort([i.value for i in t.instances], kind="stable")
        order_n = np.argsort([i.normalized for i in t.instances], kind="stable")
        assert np.array_equal(order_v, order_n)

    def test_tumor_membership_from_patch_center(self):
        mask = np.zeros((100, 100), dtype=bool)
        mask[40:60, 40:60] = True
        inst = FeatureInstance(index=0, section=0, center_xy=(50.0, 50.0), value=1.0)
        out_inst = FeatureInstance(index=1, section=0, center_xy=(10.0, 10.0), value=2.0)
        [t] = normalize_and_index(
            [FeatureTable("f", [inst, out_inst])],
            wide_report(),
            IDENTITY_MAPPER,
            tumor_masks={"2": [mask]},
        )
        assert t.instances[0].tumor_id == "2"
        assert t.instances[1].tumor_id is None

    def test_empty_table_errors(self):
        with pytest.raises(ValueError):
            normalize_and_index([FeatureTable("f", [])], wide_report(), IDENTITY_MAPPER)


class TestPercentileThreshold:
    def test_zero_returns_all(self):
        t = processed(np.arange(10))
        assert len(percentile_threshold(t, 0)) == 10

    def test_eighty_on_thousand_distinct(self):
        rng = np.random.default_rng(7)
        vals = np.arange(1000.0)
        rng.shuffle(vals)
        t = processed(vals)
        assert len(percentile_threshold(t, 80)) == 200

    def test_out_of_range_rejected(self):
        t = processed([1.0, 2.0])
        with pytest.raises(ValueError):
            percentile_threshold(t, 101)

    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60),
        st.floats(0, 100),
        st.floats(0, 100),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_nesting(self, values, q1, q2):
        lo, hi = min(q1, q2), max(q1, q2)
        t = processed(values)
        got_hi = {i.index for i in percentile_threshold(t, hi)}
        got_lo = {i.index for i in percentile_threshold(t, lo)}
        assert got_hi <= got_lo


class TestCsvRoundTrip:
    def test_write_read_value_identical(self, tmp_path):
        rng = np.random.default_rng(8)
        t = processed(rng.random(20) * 1e3)
        t.instances[3] = __import__("dataclasses").replace(t.instances[3], tumor_id="7")
        path = tmp_path / "f.csv"
        write_feature_csv(t, path)
        back = read_feature_csv(path)
        for a, b in zip(t.instances, back.instances):
            assert a.index == b.index
            assert a.value == b.value
            assert a.normalized == b.normalized
            assert a.percentile_rank == b.percentile_rank
            assert (a.tumor_id or None) == b.tumor_id
            assert np.array_equal(a.position, b.position)

    def test_deterministic_bytes(self, tmp_path):
        t = processed(np.linspace(0, 1, 9) ** 2)
        write_feature_csv(t, tmp_path / "a.csv")
        write_feature_csv(t, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_index_sets_identical_across_kinds(self):
        rng = np.random.default_rng(9)
        img = (rng.random((220, 220, 3)) * 255).astype(np.uint8)
        values = all_feature_values(img[:100, :100])
        assert set(values) == set(all_feature_values(img[100:200, 100:200]))
