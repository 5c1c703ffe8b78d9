import json
import shutil
import threading
import time
import urllib.request
import urllib.error

import pytest

from histo3d.cli import main
from histo3d.pipeline import ConfigError, PipelineConfig, STAGES, run_pipeline
from histo3d.scene import load_bundle
from histo3d.server import make_server

from conftest import write_config


class TestConfig:
    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig.from_json(tmp_path / "nope.json")

    def test_field_level_messages(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"registration": {"min_ncc": 2.0}}))
        with pytest.raises(ConfigError) as exc:
            PipelineConfig.from_json(path)
        msg = str(exc.value)
        assert "root" in msg and "sample_id" in msg and "registration" in msg

    def test_cli_invalid_config_exits_two(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text("{}")
        assert main(["run", "--config", str(path)]) == 2
        assert "invalid config" in capsys.readouterr().err

    def test_unknown_stage_rejected(self, small_bundle_dir, tmp_path):
        cfg_path = write_config(tmp_path, small_bundle_dir)
        cfg = PipelineConfig.from_json(cfg_path)
        with pytest.raises(ConfigError, match="unknown stages"):
            run_pipeline(cfg, stages=["meshes"])


class TestPipelineRun:
    def test_full_run_produces_valid_bundle(self, small_bundle_dir):
        bundle = load_bundle(small_bundle_dir)
        assert (small_bundle_dir / "models" / "organ.stl").exists()
        assert bundle.manifest["features"]["organ"]

    def test_registration_diagnostics_written(self, small_bundle_dir):
        trace = (small_bundle_dir / "registered" / "energy_trace.csv").read_text().splitlines()
        assert trace[0] == "iteration,total_energy"
        assert len(trace) > 1
        matches = (small_bundle_dir / "registered" / "matches.csv").read_text().splitlines()
        assert matches[0] == "section,target_section,vx,vy,dx,dy,score,accepted"
        assert len(matches) > 1

    def test_registered_tumor_masks_subset_of_tissue(self, small_bundle_dir):
        from histo3d.stack import load_stack

        stack = load_stack(small_bundle_dir / "registered")
        assert any(s.tumor_masks for s in stack.sections)
        for s in stack.sections:
            for _, m in s.tumor_masks:
                assert not (m & ~s.tissue_mask).any()

    def test_feature_tables_share_index_sets(self, small_bundle_dir):
        from histo3d.features import read_feature_csv

        csvs = sorted((small_bundle_dir / "features" / "organ").glob("*.csv"))
        assert len(csvs) > 2
        reference = {i.index for i in read_feature_csv(csvs[0]).instances}
        for path in csvs[1:]:
            assert {i.index for i in read_feature_csv(path).instances} == reference

    def test_mesh_stage_without_registration_fails(self, small_phantom_dir, tmp_path, capsys):
        work = tmp_path / "sample"
        shutil.copytree(small_phantom_dir, work)
        cfg_path = write_config(tmp_path, work)
        assert main(["run", "--config", str(cfg_path), "--stages", "mesh"]) == 1
        assert "registration outputs missing" in capsys.readouterr().err

    def test_rerun_skips_all_stages(self, small_bundle_dir, tmp_path):
        cfg_path = write_config(tmp_path, small_bundle_dir)
        stamps = {
            s: (small_bundle_dir / f".stage_{s}.json").stat().st_mtime for s in STAGES
        }
        assert main(["run", "--config", str(cfg_path)]) == 0
        for s in STAGES:
            assert (small_bundle_dir / f".stage_{s}.json").stat().st_mtime == stamps[s]

    def test_deleting_features_reruns_only_downstream(self, small_bundle_dir, tmp_path):
        cfg_path = write_config(tmp_path, small_bundle_dir)
        shutil.rmtree(small_bundle_dir / "features")
        before = {
            s: (small_bundle_dir / f".stage_{s}.json").stat().st_mtime for s in STAGES
        }
        time.sleep(0.05)
        assert main(["run", "--config", str(cfg_path)]) == 0
        after = {
            s: (small_bundle_dir / f".stage_{s}.json").stat().st_mtime for s in STAGES
        }
        assert after["register"] == before["register"]
        assert after["mesh"] == before["mesh"]
        assert after["features"] > before["features"]
        assert after["scene"] > before["scene"]
        load_bundle(small_bundle_dir)


@pytest.fixture(scope="module")
def served(small_bundle_dir):
    server = make_server(small_bundle_dir, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", small_bundle_dir
    server.shutdown()


def fetch(url, headers=None):
    req = urllib.request.Request(url, headers=headers or {})
    return urllib.request.urlopen(req, timeout=10)


class TestServe:
    def test_manifest_served_with_type(self, served):
        base, _ = served
        with fetch(f"{base}/bundle.json") as resp:
            assert resp.status == 200
            assert resp.headers["Content-Type"] == "application/json"
            json.loads(resp.read())

    def test_missing_file_404(self, served):
        base, _ = served
        with pytest.raises(urllib.error.HTTPError) as exc:
            fetch(f"{base}/patches/organ/99999.png")
        assert exc.value.code == 404

    def test_byte_range_on_stl(self, served):
        base, root = served
        full = (root / "models" / "organ.stl").read_bytes()
        with fetch(f"{base}/models/organ.stl", {"Range": "bytes=80-99"}) as resp:
            assert resp.status == 206
            body = resp.read()
            assert body == full[80:100]
            assert resp.headers["Content-Range"] == f"bytes 80-99/{len(full)}"

    def test_suffix_range(self, served):
        base, root = served
        full = (root / "colormaps.csv").read_bytes()
        with fetch(f"{base}/colormaps.csv", {"Range": "bytes=-16"}) as resp:
            assert resp.status == 206
            assert resp.read() == full[-16:]

    def test_unsatisfiable_range_416(self, served):
        base, root = served
        size = (root / "bundle.json").stat().st_size
        with pytest.raises(urllib.error.HTTPError) as exc:
            fetch(f"{base}/bundle.json", {"Range": f"bytes={size + 10}-"})
        assert exc.value.code == 416

    def test_path_escape_blocked(self, served):
        base, _ = served
        with pytest.raises(urllib.error.HTTPError) as exc:
            fetch(f"{base}/../../etc/passwd")
        assert exc.value.code == 404

    def test_invalid_bundle_refuses_to_start(self, tmp_path):
        with pytest.raises(Exception):
            make_server(tmp_path, port=0)


class TestPhantomCli:
    def test_phantom_subcommand_writes_stack(self, tmp_path):
        spec = {
            "width": 128,
            "height": 128,
            "n_sections": 3,
            "organ_semi_axes": [45.0, 40.0],
            "organ_z_semi": 3.5,
            "nucleus_count": 50,
            "max_translation": 0.0,
            "max_rotation_deg": 0.0,
            "elastic_max": 0.0,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "out"
        assert main(["phantom", "--spec", str(spec_path), "--seed", "5", "--out", str(out)]) == 0
        assert (out / "stack.json").exists()
        assert (out / "ground_truth.json").exists()

    def test_bad_spec_key_exits_two(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"organ_radius": 10}))
        out = tmp_path / "out"
        assert main(["phantom", "--spec", str(spec_path), "--out", str(out)]) == 2
