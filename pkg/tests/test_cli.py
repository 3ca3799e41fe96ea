import json

import numpy as np
import pytest

from surfsplat.cli import main


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    rc = main(["gen-synthetic", "--preset", "two-object", "--out", str(root),
               "--views", "2", "--size", "16", "--feature-dim", "2"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(dataset_dir), "--out", str(out),
               "--iterations", "5"])
    assert rc == 0
    return out


class TestGenSynthetic:
    def test_layout(self, dataset_dir):
        for rel in ("cameras.json", "classes.json", "init_points.ply",
                    "gt_mesh.ply", "scene_spec.json", "text_queries.json",
                    "images/0000.png", "normals/0001.raw", "masks/0000.pgm",
                    "feats/0001.raw", "gtmasks/object1/0000.png",
                    "gtmasks/object2/0001.png"):
            assert (dataset_dir / rel).exists(), rel

    def test_spec_file_regenerates(self, dataset_dir, tmp_path, capsys):
        rc = main(["gen-synthetic", "--spec",
                   str(dataset_dir / "scene_spec.json"),
                   "--out", str(tmp_path / "again")])
        assert rc == 0
        a = (dataset_dir / "images" / "0000.png").read_bytes()
        b = (tmp_path / "again" / "images" / "0000.png").read_bytes()
        assert a == b

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-synthetic", "--preset", "two-object"])
        assert exc.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestTrain:
    def test_outputs(self, run_dir):
        assert (run_dir / "checkpoint.glsc").exists()
        assert (run_dir / "checkpoint_head.npz").exists()
        lines = (run_dir / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 5
        cfg = json.loads((run_dir / "resolved-config.json").read_text())
        assert cfg["iterations"] == 5

    def test_no_clip_drops_term(self, dataset_dir, tmp_path):
        out = tmp_path / "noclip"
        rc = main(["train", "--data", str(dataset_dir), "--out", str(out),
                   "--iterations", "2", "--no-clip"])
        assert rc == 0
        rec = json.loads((out / "train_log.jsonl").read_text().splitlines()[-1])
        assert rec["l_clip"] == 0.0
        cfg = json.loads((out / "resolved-config.json").read_text())
        assert cfg["use_clip_loss"] is False

    def test_weight_flag_applies(self, dataset_dir, tmp_path):
        out = tmp_path / "weighted"
        rc = main(["train", "--data", str(dataset_dir), "--out", str(out),
                   "--iterations", "1", "--alpha-n", "0.2",
                   "--densify-grad-threshold", "0.0004"])
        assert rc == 0
        cfg = json.loads((out / "resolved-config.json").read_text())
        assert cfg["weights"]["alpha_n"] == 0.2
        assert cfg["densify_grad_threshold"] == 0.0004

    def test_missing_dataset_is_runtime_error(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o"), "--iterations", "1"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestMeshAndEval:
    def test_mesh_and_eval_pipeline(self, dataset_dir, run_dir, tmp_path,
                                    capsys):
        mesh_path = tmp_path / "mesh.ply"
        rc = main(["mesh", "--scene", str(run_dir / "checkpoint.glsc"),
                   "--data", str(dataset_dir), "--out", str(mesh_path),
                   "--resolution", "48"])
        assert rc == 0
        assert mesh_path.exists()
        rc = main(["eval", "--pred", str(mesh_path),
                   "--gt", str(dataset_dir / "gt_mesh.ply"),
                   "--samples", "500", "--out", str(tmp_path / "m.json")])
        assert rc == 0
        table = json.loads((tmp_path / "m.json").read_text())
        assert set(table) == {"accuracy", "completion", "chamfer_l1",
                              "normal_consistency", "f_score"}

    def test_semantic_mesh(self, dataset_dir, run_dir, tmp_path):
        mesh_path = tmp_path / "sem.ply"
        rc = main(["mesh", "--scene", str(run_dir / "checkpoint.glsc"),
                   "--data", str(dataset_dir), "--out", str(mesh_path),
                   "--semantic", "--resolution", "48"])
        assert rc == 0
        assert mesh_path.with_suffix(".palette.json").exists()

    def test_missing_scene_is_runtime_error(self, dataset_dir, tmp_path,
                                            capsys):
        rc = main(["mesh", "--scene", str(tmp_path / "no.glsc"),
                   "--data", str(dataset_dir), "--out", str(tmp_path / "m.ply")])
        assert rc == 1
        capsys.readouterr()


class TestQueryAndEvalSeg:
    def test_query_writes_masks(self, dataset_dir, run_dir, tmp_path):
        out = tmp_path / "sel"
        rc = main(["query", "--scene", str(run_dir / "checkpoint.glsc"),
                   "--data", str(dataset_dir), "--text-name", "object1",
                   "--threshold", "0.9", "--out", str(out)])
        assert rc == 0
        sel = json.loads((out / "selection.json").read_text())
        assert sel["query"] == "object1"
        assert (out / "0000.png").exists() and (out / "0001.png").exists()

    def test_unknown_query_fails(self, dataset_dir, run_dir, tmp_path,
                                 capsys):
        rc = main(["query", "--scene", str(run_dir / "checkpoint.glsc"),
                   "--data", str(dataset_dir), "--text-name", "unicorn",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "unicorn" in capsys.readouterr().err

    def test_eval_seg_perfect_masks(self, dataset_dir, tmp_path, capsys):
        gt_dir = dataset_dir / "gtmasks" / "object1"
        rc = main(["eval-seg", "--pred", str(gt_dir), "--gt", str(gt_dir),
                   "--out", str(tmp_path / "seg.json")])
        assert rc == 0
        table = json.loads((tmp_path / "seg.json").read_text())
        assert table["miou"] == 1.0 and table["mbiou"] == 1.0
        assert table["views"] == 2

    def test_eval_seg_empty_dir_fails(self, dataset_dir, tmp_path, capsys):
        rc = main(["eval-seg", "--pred", str(tmp_path),
                   "--gt", str(dataset_dir / "gtmasks" / "object1")])
        assert rc == 1
        capsys.readouterr()
