import subprocess
import sys

import numpy as np
import pytest

from pointloc.cli import RunConfig, exit_code, load_config, main, oracle_embedding, parse_config_text
from pointloc.errors import ConfigError, DegenerateConfiguration, FormatError, NoConsensus
from pointloc.geometry import parse_pose, read_poses
from pointloc.pipeline import build_database, localize
from pointloc.synth import oracle_image_features, read_scene

SMALL = ["--set", "M=4096", "--set", "k=2"]


def kv(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, kv(cap.out), cap.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene, db = root / "scene", root / "db"
    assert main(["synth", "--points", "60000", "--poses", "8", "--queries", "4", "--width", "128",
                 "--height", "128", "--out", str(scene), "--set", "seed=2"]) == 0
    assert main(["partition", "--scene", str(scene), "--out", str(db), *SMALL]) == 0
    assert main(["index", "--scene", str(scene), "--db", str(db), *SMALL]) == 0
    return root, scene, db


class TestConfig:
    def test_published_defaults(self):
        cfg = RunConfig()
        # [PAPER] s = 9, L = 6, M = 65,536, top-4 retrieval, 10 m indoor radius
        assert (cfg.s, cfg.L, cfg.M, cfg.k, cfg.radius) == (9, 6, 65536, 4, 10.0)

    def test_parse(self):
        vals = parse_config_text("# comment\ng = 8\nradius=30  # outdoor\n\nthresholds=0.5:3\n")
        assert vals == {"g": 8, "radius": 30.0, "thresholds": "0.5:3"}

    def test_unknown_and_malformed(self):
        with pytest.raises(ConfigError):
            parse_config_text("gamma=1")
        with pytest.raises(ConfigError):
            parse_config_text("g 8")
        with pytest.raises(ConfigError):
            parse_config_text("g=eight")

    def test_overrides_win(self, tmp_path):
        (tmp_path / "c.cfg").write_text("k=3\nseed=4\n")
        cfg = load_config(tmp_path / "c.cfg", ["k=1"])
        assert (cfg.k, cfg.seed) == (1, 4)

    @pytest.mark.parametrize("bad", ["s=4", "g=0", "M=0", "radius=-1", "ransac_confidence=0", "thresholds=0.1",
                                     "thresholds=a:b", "top_n=0"])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            load_config(None, [bad])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_pipeline_mapping(self):
        pc = load_config(None, ["M=100", "s=5", "ransac_confidence=1"]).pipeline()
        assert (pc.m, pc.kernel, pc.ransac_confidence) == (100, 5, None)


class TestExitCodes:
    def test_mapping(self):
        assert exit_code(ConfigError("x")) == 2
        assert exit_code(FormatError("x")) == 3
        assert exit_code(OSError("x")) == 3
        assert exit_code(NoConsensus("x")) == 4

    def test_unknown_key(self, capsys, workspace):
        _, scene, db = workspace
        code, _, err = run(capsys, "partition", "--scene", scene, "--out", db, "--set", "bogus=1")
        assert code == 2 and "ConfigError" in err

    def test_binary_correspondences(self, capsys, workspace):
        _, scene, _ = workspace
        code, _, _ = run(capsys, "pnp", "--correspondences", scene / "cloud.eppc", "--intrinsics",
                         scene / "intrinsics.txt")
        assert code == 3

    def test_missing_file(self, capsys, workspace, tmp_path):
        _, scene, _ = workspace
        code, _, _ = run(capsys, "ipr", "--cloud", tmp_path / "none.eppc", "--pose", scene / "poses.txt",
                         "--intrinsics", scene / "intrinsics.txt")
        assert code == 3

    def test_algorithmic_failure(self, capsys, workspace, tmp_path):
        _, scene, _ = workspace
        (tmp_path / "c.txt").write_text("0 1 2 0 0 5 1 1 0\n1 3 4 1 0 5 1 1 0\n")
        code, _, err = run(capsys, "pnp", "--correspondences", tmp_path / "c.txt", "--intrinsics",
                           scene / "intrinsics.txt")
        assert code == 4 and DegenerateConfiguration.__name__ in err

    def test_stage_in_error_message(self, capsys, workspace, tmp_path):
        _, scene, db = workspace
        (tmp_path / "q.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 500\n")
        code, _, err = run(capsys, "localize", "--scene", scene, "--db", db, "--queries", tmp_path / "q.txt", *SMALL)
        assert code == 4 and "stage=match" in err

    def test_empty_bench(self, capsys, workspace, tmp_path):
        _, scene, db = workspace
        (tmp_path / "q.txt").write_text("")
        code, _, _ = run(capsys, "bench", "--scene", scene, "--db", db, "--queries", tmp_path / "q.txt")
        assert code == 4


class TestSubcommands:
    def test_synth_outputs(self, workspace):
        _, scene, db = workspace
        for name in ("cloud.eppc", "poses.txt", "intrinsics.txt", "geometry.txt", "queries.txt", "gt/0000.txt"):
            assert (scene / name).exists()
        assert (db / "index.epix").exists() and (db / "descriptors" / "0000.epds").exists()

    def test_retrieve(self, capsys, workspace):
        _, scene, db = workspace
        code, out, _ = run(capsys, "retrieve", "--db", db, "--scene", scene, "--queries", scene / "queries.txt",
                           "--query-index", 1, *SMALL)
        assert code == 0
        assert out["ids"].split(",")[0] == "1"  # queries perturb poses in order

    def test_localize_matches_fused_pipeline(self, capsys, workspace):
        _, scene_dir, db = workspace
        code, out, _ = run(capsys, "localize", "--scene", scene_dir, "--db", db, "--queries",
                           scene_dir / "queries.txt", "--query-index", 2, *SMALL)
        assert code == 0
        assert float(out["rte"]) < 0.1 and float(out["rre"]) < 1.0
        cfg = load_config(None, SMALL[1::2])
        scene = read_scene(scene_dir)
        emb = oracle_embedding(scene, cfg)
        fused_db = build_database(scene.cloud, scene.poses, scene.camera, emb, cfg.pipeline())
        q = read_poses(scene_dir / "queries.txt")[2]
        from pointloc.features import PatchGrid

        image = oracle_image_features(scene.boxes, q, scene.camera, emb, PatchGrid(128, 128, 16), cfg.radius)
        fused = localize(fused_db, image, scene.camera, emb.classifier(), cfg.pipeline())
        assert parse_pose(out["pose"]).as_matrix().tobytes() == fused.pose.as_matrix().tobytes()

    def test_bench_and_evaluate_write_figures(self, capsys, workspace):
        root, scene, db = workspace
        code, out, _ = run(capsys, "bench", "--scene", scene, "--db", db, "--queries", scene / "queries.txt",
                           "--out", root / "bench.txt", "--estimates-out", root / "est.txt", *SMALL)
        assert code == 0
        assert out["queries"] == "4" and float(out["recall_0.1m_1deg"]) == 1.0
        assert int(out["max_comparisons"]) <= 64 + 1 + 256
        assert "latency_match_p95" in out
        for suffix in ("recall", "errors", "latency"):
            assert (root / f"bench_{suffix}.png").stat().st_size > 0
        assert kv((root / "bench.txt").read_text()) == {k: v for k, v in out.items() if k != "figure"}

        code, ev, _ = run(capsys, "evaluate", "--estimates", root / "est.txt", "--gt", scene / "queries.txt",
                          "--figures", root / "figs")
        assert code == 0 and ev["recall_0.1m_1deg"] == out["recall_0.1m_1deg"]
        assert (root / "figs" / "recall.png").exists()

    def test_evaluate_with_failed_rows(self, capsys, workspace, tmp_path):
        _, scene, _ = workspace
        lines = (scene / "queries.txt").read_text().splitlines()
        lines[0] = " ".join(["nan"] * 12)
        (tmp_path / "est.txt").write_text("\n".join(lines) + "\n")
        code, out, _ = run(capsys, "evaluate", "--estimates", tmp_path / "est.txt", "--gt", scene / "queries.txt",
                           "--no-figures", "--set", "thresholds=0.1:1")
        assert code == 0 and out["localized"] == "3" and float(out["recall_0.1m_1deg"]) == 0.75
        (tmp_path / "short.txt").write_text(lines[1] + "\n")
        code, _, _ = run(capsys, "evaluate", "--estimates", tmp_path / "short.txt", "--gt", scene / "queries.txt",
                         "--no-figures")
        assert code == 3

    def test_ipr(self, capsys, workspace, tmp_path):
        _, scene, _ = workspace
        code, out, _ = run(capsys, "ipr", "--cloud", scene / "cloud.eppc", "--pose", scene / "poses.txt",
                           "--pose-index", 1, "--intrinsics", scene / "intrinsics.txt", "--out", tmp_path / "k.txt",
                           "--depth-out", tmp_path / "d.epdm")
        assert code == 0
        kept = np.loadtxt(tmp_path / "k.txt", dtype=int)
        assert len(kept) == int(out["kept"]) > 0
        from pointloc.ipr import load_depth_map

        assert load_depth_map(tmp_path / "d.epdm").shape == (128, 128)

    def test_pnp_on_ground_truth(self, capsys, workspace, tmp_path):
        _, scene, _ = workspace
        code, out, _ = run(capsys, "pnp", "--correspondences", scene / "gt" / "0003.txt", "--intrinsics",
                           scene / "intrinsics.txt", "--out", tmp_path / "p.txt", "--kl")
        assert code == 0 and out["converged"] == "1"
        est = read_poses(tmp_path / "p.txt")[0]
        gt = read_poses(scene / "poses.txt")[3]
        np.testing.assert_allclose(est.as_matrix(), gt.as_matrix(), atol=1e-8)
        assert float(out["kl_se"]) >= 0

    def test_module_entry_point(self, workspace):
        res = subprocess.run([sys.executable, "-m", "pointloc.cli", "synth", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "--points" in res.stdout
