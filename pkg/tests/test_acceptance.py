"""Acceptance suite: one test per criterion, printing a pass line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines. The
30-section registration phantom makes this module take a few minutes.
"""

import json
import shutil
import time

import numpy as np
import pytest

from histo3d import meshing
from histo3d.features import (
    FeatureInstance,
    FeatureTable,
    PositionMapper,
    feature_vector,
    normalize_and_index,
    percentile_threshold,
)
from histo3d.meshing import (
    align_tumor,
    mask_to_model_similarity,
    measure_geometry,
    mesh_volume,
    read_stl,
    reconstruct_surface,
    validate_mesh,
)
from histo3d.phantom import PhantomSpec, TumorSpec, generate_phantom
from histo3d.registration import (
    RegistrationParams,
    block_match,
    ncc,
    register_stack,
)
from histo3d.scene import BundleError, validate_bundle
from histo3d.springs import build_triangular_mesh, relax, RelaxDivergence
from histo3d.stack import Section, SectionStack, StackMetadata, z_spacing_px

from conftest import SMALL_SPEC, write_config


def report(n: int, line: str) -> None:
    print(f"ACCEPTANCE {n}: {line}: PASS", flush=True)


REG_SPEC = PhantomSpec(
    width=1000,
    height=1000,
    n_sections=30,
    organ_semi_axes=(300.0, 240.0),
    organ_z_semi=18.0,
    tumors=(TumorSpec("1", center=(420.0, 500.0, 14.0), semi_axes=(70.0, 60.0, 4.0)),),
    max_translation=10.0,
    max_rotation_deg=5.0,
    elastic_max=5.0,
    nucleus_count=1600,
    landmark_grid_step=100,
)


def test_criterion_1_registration_recovery(tmp_path):
    """30-section jittered phantom: mean landmark error < 2 px, median < 1.5 px,
    registration wall time < 120 s."""
    stack, gt = generate_phantom(REG_SPEC, seed=7, out_dir=tmp_path / "reg")
    params = RegistrationParams(scale=1.0)
    t0 = time.time()
    result = register_stack(stack, params)
    wall = time.time() - t0

    errors = []
    for lm in gt["landmarks"]:
        mapped, inside = result.transforms[lm["section"]].apply(
            np.asarray([lm["observed"]])
        )
        assert inside.all()
        errors.append(float(np.linalg.norm(mapped[0] - np.asarray(lm["true"]))))
    errors = np.asarray(errors)
    mean, median = errors.mean(), float(np.median(errors))
    assert mean < 2.0, f"mean landmark error {mean:.3f} px"
    assert median < 1.5, f"median landmark error {median:.3f} px"
    assert wall < 120.0, f"registration took {wall:.1f} s"
    report(
        1,
        f"registration recovery mean={mean:.2f}px median={median:.2f}px "
        f"({len(errors)} landmarks, {wall:.0f}s)",
    )


def test_criterion_2_energy_monotone_and_divergence():
    """Energy trace non-increasing (1e-9 relative) on 100 seeded random
    systems at the default step size; detector fires at 100x default."""
    params = RegistrationParams()
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mesh = build_triangular_mesh(
            float(rng.integers(90, 160)), float(rng.integers(90, 160)), 30.0
        )
        mesh.stiffness = rng.uniform(0.1, 1.0, len(mesh.springs))
        mesh.current = mesh.rest + rng.uniform(-5, 5, mesh.rest.shape)
        mesh.fixed[0] = True
        trace = relax(
            [mesh], [], step_size=params.step_size, converge_eps=1e-5, max_iters=400
        )
        for a, b in zip(trace, trace[1:]):
            assert b <= a * (1 + 1e-9), f"energy grew at seed {seed}"
        checked += 1

    rng = np.random.default_rng(0)
    mesh = build_triangular_mesh(120, 120, 30.0)
    mesh.current = mesh.rest + rng.uniform(-5, 5, mesh.rest.shape)
    mesh.fixed[0] = True
    with pytest.raises(RelaxDivergence):
        relax([mesh], [], step_size=params.step_size * 100, max_iters=500, converge_eps=1e-9)
    report(2, f"{checked} random systems monotone; divergence fires at 100x step")


def test_criterion_3_ncc_oracle():
    """Self-correlation 1.0 +/- 1e-9; planted (6, -3) recovered exactly."""
    rng = np.random.default_rng(3)
    patch = rng.random((64, 64)) * 255
    self_score = ncc(patch, patch)
    assert self_score == pytest.approx(1.0, abs=1e-9)

    img = rng.random((300, 300)) * 255
    img2 = np.roll(np.roll(img, -3, axis=0), 6, axis=1)
    params = RegistrationParams(
        block_radius=16, search_radius=10, mesh_pitch=60, scale=1.0, min_ncc=0.5
    )
    mesh = build_triangular_mesh(299, 299, 60)
    interior = np.zeros((300, 300), dtype=bool)
    interior[60:240, 60:240] = True
    matches = block_match(img, img2, mesh, params, tissue_mask=interior)
    accepted = [m for m in matches if m.accepted]
    assert accepted
    for m in accepted:
        assert tuple(m.offset) == (6.0, -3.0)
    report(3, f"self-NCC={self_score}; (6,-3) exact at {len(accepted)} vertices")


def test_criterion_4_mesh_validity_and_sphere_volume(small_bundle_dir):
    """Phantom organ/tumor meshes watertight with outward winding; sphere
    phantom volume within 10% of (4/3) pi r^3 at r = 40 voxels."""
    names = ["organ.stl"] + [
        p.name for p in sorted((small_bundle_dir / "models").glob("tumor_*.stl"))
    ]
    assert len(names) >= 3  # organ + two tumors
    for name in names:
        mesh = read_stl(small_bundle_dir / "models" / name)
        checks = validate_mesh(mesh)
        assert checks["watertight"], f"{name}: open edges"
        assert checks["consistent_winding"], f"{name}: winding"
        assert checks["signed_volume"] > 0, f"{name}: orientation"

    r = 40.0
    md = StackMetadata(
        pixel_size_um=9.2,
        section_spacing_um=50.0,
        section_thickness_um=5.0,
        n_sections=18,
        downscale_fraction=1.0,
    )
    spacing = z_spacing_px(md, 1.0)
    n = 18
    zc = (n - 1) / 2 * spacing
    yy, xx = np.mgrid[0:110, 0:110]
    sections = []
    for i in range(n):
        rr2 = r * r - (i * spacing - zc) ** 2
        mask = ((xx - 55.0) ** 2 + (yy - 55.0) ** 2 <= rr2) if rr2 > 0 else np.zeros((110, 110), bool)
        sections.append(Section(index=i, tissue_mask=mask))
    sphere = reconstruct_surface(SectionStack(metadata=md, sections=sections), 1.0, smoothing=20)
    vol = mesh_volume(sphere)
    analytic = 4.0 / 3.0 * np.pi * r**3
    rel = abs(vol - analytic) / analytic
    assert rel < 0.10, f"sphere volume off by {rel * 100:.1f}%"
    report(4, f"{len(names)} meshes valid; sphere volume err {rel * 100:.1f}%")


def test_criterion_5_normalization_and_physical_height(small_bundle_dir):
    """Model z-extent equals target height to 1e-6 relative; 30 sections at
    50 um spacing give ~1.45 mm, within 10% of the reported ~1.5 mm."""
    reports = meshing.read_geometry_reports(small_bundle_dir / "models" / "geometry.json")
    z_extent = reports["organ_model_space"].extents[2]
    assert z_extent == pytest.approx(1.0, rel=1e-6)

    height_mm = (30 - 1) * 50.0 / 1000.0
    assert abs(height_mm - 1.5) / 1.5 < 0.10
    report(5, f"model z-extent={float(z_extent)!r}; stack height {height_mm:.2f}mm vs 1.5mm")


def test_criterion_6_tumor_alignment(small_bundle_dir):
    """Aligned tumor center within 1% of ground truth (organ-height units);
    x-extent equals its target within 1e-6; organ-rescale commutation 1e-9."""
    reports = meshing.read_geometry_reports(small_bundle_dir / "models" / "geometry.json")
    organ_mask = reports["organ_mask_space"]
    organ_model = reports["organ_model_space"]
    s_axis, offset = mask_to_model_similarity(organ_mask, organ_model)

    gt = json.loads((small_bundle_dir / "ground_truth.json").read_text())
    fraction = 0.25  # mesh fraction in the small pipeline config
    md_spacing = z_spacing_px(
        StackMetadata(
            pixel_size_um=SMALL_SPEC.pixel_size_um,
            section_spacing_um=SMALL_SPEC.section_spacing_um,
            section_thickness_um=SMALL_SPEC.section_thickness_um,
            n_sections=SMALL_SPEC.n_sections,
            downscale_fraction=fraction,
        ),
        fraction,
    )
    target_height = organ_model.extents[2]

    worst = 0.0
    for t in gt["tumors"]:
        cx, cy, cz = t["center"]
        center_mask = np.array(
            [(cx + 0.5) * fraction - 0.5, (cy + 0.5) * fraction - 0.5, cz * md_spacing]
        )
        expected = s_axis * center_mask + offset
        tumor_model = reports[f"tumor_{t['tumor_id']}_model_space"]
        err = float(np.linalg.norm(tumor_model.center - expected)) / target_height
        worst = max(worst, err)
        assert err < 0.01, f"tumor {t['tumor_id']} center off by {err * 100:.2f}% of height"

        tumor_mask_rep = reports[f"tumor_{t['tumor_id']}_mask_space"]
        s0x = (s_axis * tumor_mask_rep.extents)[0]
        assert tumor_model.extents[0] == pytest.approx(s0x, rel=1e-6)

    # organ-rescale commutation on the real tumor mesh
    mesh = read_stl(small_bundle_dir / "models" / "tumor_1.stl")
    tumor_mask_rep = reports["tumor_1_mask_space"]
    a1 = align_tumor(mesh, tumor_mask_rep, organ_mask, organ_model)
    c = 2.5
    scaled = meshing.GeometryReport(
        bbox_min=organ_model.bbox_min * c,
        bbox_max=organ_model.bbox_max * c,
        extents=organ_model.extents * c,
        center=organ_model.center * c,
        vertex_count=organ_model.vertex_count,
        triangle_count=organ_model.triangle_count,
    )
    a2 = align_tumor(mesh, tumor_mask_rep, organ_mask, scaled)
    assert np.allclose(a2.vertices, a1.vertices * c, rtol=1e-9, atol=1e-12)
    report(6, f"tumor centers within {worst * 100:.2f}% of height; commutation exact")


def test_criterion_7_feature_oracles():
    """Constant-patch GLCM/intensity, planted nuclei count, LBP mass,
    percentile threshold arithmetic."""
    const = np.full((100, 100, 3), 128, dtype=np.uint8)
    assert feature_vector(const, "glcm_energy")["glcm_energy"] == pytest.approx(1.0, abs=1e-12)
    assert feature_vector(const, "intensity")["intensity_std"] == 0.0

    patch = np.zeros((400, 400, 3), dtype=np.uint8)
    patch[:, :] = (235, 170, 200)
    yy, xx = np.mgrid[0:400, 0:400]
    for cy, cx in [(40 + 100 * i, 40 + 100 * j) for i in range(4) for j in range(3)]:
        patch[(yy - cy) ** 2 + (xx - cx) ** 2 <= 7.98**2] = (70, 48, 130)
    assert feature_vector(patch, "nuclei")["nuclei_count"] == 12.0

    rng = np.random.default_rng(11)
    noisy = (rng.random((100, 100, 3)) * 255).astype(np.uint8)
    lbp = feature_vector(noisy, "lbp")
    assert sum(lbp.values()) == pytest.approx(1.0, abs=1e-9)

    vals = np.arange(1000.0)
    rng.shuffle(vals)
    insts = [
        FeatureInstance(index=k, section=0, center_xy=(0.0, 0.0), value=float(v))
        for k, v in enumerate(vals)
    ]
    lo = np.array([-1e4] * 3)
    hi = np.array([1e4] * 3)
    rep = meshing.GeometryReport(
        bbox_min=lo, bbox_max=hi, extents=hi - lo, center=(lo + hi) / 2,
        vertex_count=0, triangle_count=0,
    )
    mapper = PositionMapper(1.0, 1.0, np.ones(3), np.zeros(3))
    [table] = normalize_and_index([FeatureTable("f", insts)], rep, mapper)
    visible = percentile_threshold(table, 80)
    assert len(visible) == 200
    report(7, "glcm=1.0, std=0, nuclei=12, lbp sum=1, q80 of 1000 -> 200")


def test_criterion_8_z_spacing_constant():
    """50 um spacing at 0.46 um pixels is 108.70 px at full resolution."""
    md = StackMetadata(
        pixel_size_um=0.46,
        section_spacing_um=50.0,
        section_thickness_um=5.0,
        n_sections=30,
        downscale_fraction=0.05,
    )
    value = z_spacing_px(md, 1.0)
    assert value == pytest.approx(108.70, abs=0.01)
    report(8, f"z spacing {value:.4f} px")


def test_criterion_9_pipeline_determinism_and_bundle_integrity(tmp_path):
    """Two runs from one seed produce bit-identical CSVs and manifest and
    vertex-identical meshes; validation catches a deleted patch file."""
    from histo3d.pipeline import PipelineConfig, run_pipeline

    roots = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        generate_phantom(SMALL_SPEC, seed=42, out_dir=root)
        cfg_dir = tmp_path / f"cfg_{tag}"
        cfg_dir.mkdir()
        cfg_path = write_config(cfg_dir, root)
        run_pipeline(PipelineConfig.from_json(cfg_path))
        roots.append(root)

    a, b = roots
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert csvs
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"CSV differs: {rel}"
    assert (a / "bundle.json").read_bytes() == (b / "bundle.json").read_bytes()

    stls = sorted(p.relative_to(a) for p in (a / "models").glob("*.stl"))
    assert stls
    for rel in stls:
        ma, mb = read_stl(a / rel), read_stl(b / rel)
        assert np.array_equal(ma.vertices, mb.vertices), f"mesh differs: {rel}"
        assert np.array_equal(ma.triangles, mb.triangles)

    victim = sorted((a / "patches" / "organ").glob("*.png"))[0]
    victim.unlink()
    with pytest.raises(BundleError) as exc:
        validate_bundle(a)
    assert victim.name in str(exc.value)
    report(
        9,
        f"{len(csvs)} CSVs + manifest bit-identical, {len(stls)} meshes "
        f"vertex-identical; deleted patch detected",
    )
