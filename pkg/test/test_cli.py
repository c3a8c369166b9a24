"""
End-to-end CLI runs on a tiny generated scene (zero-iteration training keeps them fast).
"""
import json

import pytest

from cli import main
from utils.image_io import read_png


@pytest.fixture
def desk(tmp_path):
    out = tmp_path / "desk"
    code = main(["gen-scene", "--n-gaussians", "8", "--num-views", "3", "--lr-resolution", "8",
                 "--scale", "2", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def internal(desk, tmp_path):
    out = tmp_path / "internal.iesr"
    code = main(["train-internal", "--scene-dir", str(desk), "--out", str(out), "--iters", "0",
                 "--mv-views", "1", "--scale", "2", "--quiet"])
    assert code == 0
    return out


class TestPipeline:
    def test_gen_scene_layout(self, desk):
        for name in ("scene.txt", "cameras.txt", "init.txt", "lr/000.fimg", "hr/002.fimg", "hr/001_depth.fimg"):
            assert (desk / name).exists(), name

    def test_train_internal_outputs(self, internal):
        assert internal.exists()
        assert internal.with_suffix(".scene").exists()
        log = internal.with_suffix(".log.csv").read_text(encoding="utf-8")
        assert log.startswith("step,")

    def test_guidance_then_stage_two(self, desk, internal, tmp_path, capsys):
        guidance_dir = tmp_path / "guidance"
        code = main(["build-guidance", "--scene-dir", str(desk), "--internal", str(internal),
                     "--out", str(guidance_dir), "--scale", "2", "--source", "bicubic"])
        assert code == 0
        manifest = capsys.readouterr().out.strip()
        assert manifest == str(guidance_dir / "manifest.tsv")
        assert (guidance_dir / "external" / "001_depth.fimg").exists()

        hr = tmp_path / "hr.iesr"
        code = main(["train-hr", "--scene-dir", str(desk), "--internal", str(internal), "--manifest", manifest,
                     "--out", str(hr), "--iters", "0", "--mv-views", "1", "--scale", "2", "--quiet"])
        assert code == 0
        assert hr.exists()

    def test_render(self, desk, internal, tmp_path):
        out = tmp_path / "renders"
        code = main(["render", "--checkpoint", str(internal), "--cameras", str(desk / "cameras.txt"),
                     "--views", "000,002", "--scale", "2", "--out", str(out)])
        assert code == 0
        assert sorted(p.name for p in out.iterdir()) == [
            "000.fimg", "000.png", "000_depth.png", "002.fimg", "002.png", "002_depth.png",
        ]
        assert read_png(out / "002.png").shape == (16, 16, 3)

    def test_eval_identical(self, desk, capsys):
        lr = str(desk / "lr" / "001.fimg")
        assert main(["eval", lr, lr]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["psnr"] == "inf"
        assert float(result["ssim"]) == pytest.approx(1.0)

    def test_run_experiment(self, tmp_path, capsys):
        config = tmp_path / "exp.yaml"
        config.write_text(
            "n_gaussians: 6\nnum_views: 4\nholdout_views: [3]\nlr_resolution: 8\nscale: 2\n"
            "thresholds: [0.6]\ntrain:\n  iterations: 0\n  mv_views: 1\n",
            encoding="utf-8",
        )
        code = main(["run-experiment", "--config", str(config), "--out", str(tmp_path / "run"), "--quiet"])
        assert code == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["name"] for r in rows] == ["internal", "external-only", "full", "T=0.6"]
        assert (tmp_path / "run" / "results.csv").exists()

    def test_sweep_threshold(self, tmp_path, capsys):
        config = tmp_path / "exp.cfg"
        config.write_text("n_gaussians = 6\nnum_views = 4\nholdout_views = [3]\nlr_resolution = 8\nscale = 2\n"
                          "train.mv_views = 1\n", encoding="utf-8")
        code = main(["sweep-threshold", "--config", str(config), "--thresholds", "0,1", "--iters", "0",
                     "--out", str(tmp_path / "sweep"), "--quiet"])
        assert code == 0
        names = [line.split("\t")[0] for line in capsys.readouterr().out.strip().splitlines()]
        assert names == ["internal", "T=0", "T=1"]

    def test_set_overrides_apply_last(self, desk, tmp_path):
        out = tmp_path / "x.iesr"
        code = main(["train-internal", "--scene-dir", str(desk), "--out", str(out), "--iters", "0",
                     "--mv-views", "1", "--scale", "2", "--quiet",
                     "--set", "iterations=2", "--set", "lambda_ds=0.5", "--set", "loss.fusion=sum"])
        assert code == 0
        assert len(out.with_suffix(".log.csv").read_text(encoding="utf-8").splitlines()) == 3

    def test_set_reaches_experiment_spec(self, tmp_path, capsys):
        config = tmp_path / "exp.yaml"
        config.write_text("n_gaussians: 6\nnum_views: 4\nholdout_views: [3]\nlr_resolution: 8\nscale: 2\n"
                          "train:\n  iterations: 0\n  mv_views: 1\n", encoding="utf-8")
        code = main(["run-experiment", "--config", str(config), "--out", str(tmp_path / "run"), "--quiet",
                     "--set", "thresholds=[0.3]", "--set", "fusion=sum"])
        assert code == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["name"] for r in rows] == ["internal", "external-only", "full", "T=0.3"]

    def test_run_experiment_over_seeds(self, tmp_path, capsys):
        config = tmp_path / "exp.yaml"
        config.write_text("n_gaussians: 6\nnum_views: 4\nholdout_views: [3]\nlr_resolution: 8\nscale: 2\n"
                          "thresholds: []\ntrain:\n  iterations: 0\n  mv_views: 1\n", encoding="utf-8")
        out = tmp_path / "run"
        code = main(["run-experiment", "--config", str(config), "--out", str(out), "--seeds", "0,1", "--quiet"])
        assert code == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["name"] for r in rows] == ["internal", "external-only", "full"]
        for name in ("results.csv", "seed_0/results.csv", "seed_1/full.iesr"):
            assert (out / name).exists(), name


class TestExitCodes:
    def test_unknown_config_key(self, desk, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("learning_rate = 3\n", encoding="utf-8")
        code = main(["train-internal", "--scene-dir", str(desk), "--out", str(tmp_path / "x.iesr"),
                     "--config", str(config)])
        assert code == 2

    def test_unknown_view(self, desk, tmp_path):
        code = main(["train-internal", "--scene-dir", str(desk), "--views", "042", "--iters", "0",
                     "--out", str(tmp_path / "x.iesr")])
        assert code == 2

    def test_missing_scene_dir(self, tmp_path):
        code = main(["train-internal", "--scene-dir", str(tmp_path / "absent"), "--iters", "0",
                     "--out", str(tmp_path / "x.iesr")])
        assert code == 2

    def test_invalid_flag_value(self, desk, tmp_path):
        code = main(["train-internal", "--scene-dir", str(desk), "--threshold", "-1",
                     "--out", str(tmp_path / "x.iesr")])
        assert code == 2

    def test_eval_shape_mismatch(self, desk, capsys):
        code = main(["eval", str(desk / "lr" / "000.fimg"), str(desk / "hr" / "000.fimg")])
        assert code == 2

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-scene"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("override", ["learning_rate=3", "fusion=average", "iterations"])
    def test_bad_set_override(self, desk, tmp_path, override):
        code = main(["train-internal", "--scene-dir", str(desk), "--iters", "0",
                     "--out", str(tmp_path / "x.iesr"), "--set", override])
        assert code == 2

    def test_malformed_seeds(self, tmp_path):
        code = main(["sweep-threshold", "--seeds", "0,x", "--iters", "0", "--out", str(tmp_path / "sweep")])
        assert code == 2
