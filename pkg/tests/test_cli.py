import numpy as np
import pytest

from conftest import TINY
from gmgenet import cli
from gmgenet.config import phantom_run_config
from gmgenet.ctprep import preprocess
from gmgenet.dataio import load_manifest, load_sample_volume, read_pgm, read_volume, write_array, write_volume
from gmgenet.densenet3d import build_model, save_checkpoint
from gmgenet.phantom import PhantomSpec, generate


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestUsage:
    def test_unknown_flag_names_token(self, capsys):
        code, _, err = run(["preprocess", "--bogus-flag", "3"], capsys)
        assert code == 1
        assert "--bogus-flag" in err and err.startswith("error code=1")

    def test_unknown_flag_reported_before_missing_required(self, capsys):
        code, _, err = run(["gradcam", "--nope"], capsys)
        assert code == 1 and "--nope" in err

    def test_missing_required(self, capsys):
        code, _, err = run(["synth"], capsys)
        assert code == 1 and "--out" in err

    def test_unknown_subcommand(self, capsys):
        code, _, err = run(["train-everything"], capsys)
        assert code == 1 and "kind=usage" in err

    def test_help_lists_config_keys(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["run-all", "--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        assert "--classifier-epochs" in out and "--heatmap-stride" in out


class TestExitCodes:
    def test_validation_error(self, tmp_path, capsys):
        code, _, err = run(["preprocess", "--alpha", "0.3", "--run-dir", tmp_path], capsys)
        assert code == 1 and "kind=validation" in err and "alpha" in err

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("nonsense=1\n")
        code, _, err = run(["preprocess", "--config", tmp_path / "c.cfg", "--run-dir", tmp_path], capsys)
        assert code == 1 and "nonsense" in err

    def test_io_error_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(["preprocess", "--manifest", tmp_path / "none.csv", "--run-dir", tmp_path / "r"], capsys)
        assert code == 2 and "kind=io" in err

    def test_io_error_missing_stage(self, tmp_path, capsys):
        code, _, err = run(["evaluate", "--run-dir", tmp_path], capsys)
        assert code == 2

    def test_io_error_corrupt_volume(self, tmp_path, capsys):
        bad = tmp_path / "v.gmgv"
        bad.write_bytes(b"XXXX" + bytes(40))
        ck = tmp_path / "m.gmgm"
        save_checkpoint(build_model(phantom_run_config().model_config("extractor", (8, 8, 8), 0)), ck)
        code, _, err = run(["gradcam", "--checkpoint", ck, "--volume", bad, "--out", tmp_path / "o"], capsys)
        assert code == 2 and "offset 0" in err

    def test_numerical_error(self, tmp_path, capsys, monkeypatch):
        def explode(*a, **k):
            raise cli.TrainingDivergedError(0, 0, float("nan"))

        monkeypatch.setattr(cli.pipeline, "stage_preprocess", explode)
        code, _, err = run(["preprocess", "--run-dir", tmp_path], capsys)
        assert code == 3 and "kind=numerical" in err

    def test_env_precedence(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GMGE_ALPHA", "0.3")
        code, _, err = run(["preprocess", "--run-dir", tmp_path], capsys)
        assert code == 1 and "alpha" in err
        code, _, err = run(["preprocess", "--run-dir", tmp_path, "--alpha", "0.05"], capsys)
        assert "alpha" not in err


class TestCommands:
    def test_synth_then_run_all(self, tmp_path, capsys):
        code, out, _ = run(["synth", "--out", tmp_path / "data", "--per-class", 15, "--seed", 1], capsys)
        assert code == 0 and "samples=30" in out
        cfg = tmp_path / "data" / "phantom.cfg"
        assert "grid=32x32x32" in cfg.read_text()
        flags = [f"--{k.replace('_', '-')}={v}" for k, v in TINY.items()]
        code, out, err = run(["run-all", "--config", cfg, "--run-dir", tmp_path / "run", *flags], capsys)
        assert code == 0, err
        assert "GMGENet (VOI)" in out and "paired t-test" in out
        assert (tmp_path / "run" / "report.txt").read_text() in out
        assert "stage=evaluate" in (tmp_path / "run" / "run.log").read_text()
        echoed = (tmp_path / "run" / "config.txt").read_text()
        assert "classifier_epochs=1" in echoed and f"run_dir={tmp_path / 'run'}" in echoed

    def test_gradcam_writes_heatmap_and_slices(self, tmp_path, capsys):
        generate(PhantomSpec(seed=2), 1, tmp_path / "data")
        cfg = phantom_run_config()
        sample = load_manifest(tmp_path / "data" / "manifest.csv")[0]
        vol = preprocess(load_sample_volume(sample), cfg.prep_config())
        write_volume(vol, tmp_path / "vol.gmgv")
        ck = tmp_path / "m.gmgm"
        save_checkpoint(build_model(cfg.model_config("extractor", cfg.grid_whd, 0)), ck)
        code, out, err = run(["gradcam", "--checkpoint", ck, "--volume", tmp_path / "vol.gmgv", "--out", tmp_path / "o"], capsys)
        assert code == 0, err
        hm = read_volume(tmp_path / "o" / "heatmap.gmgv").voxels
        assert hm.shape == (32, 32, 32) and 0 <= hm.min() and hm.max() <= 1
        slices = sorted(p.name for p in (tmp_path / "o" / "slices").iterdir())
        assert len(slices) == 12  # z = 0, 10, 20, 30
        assert read_pgm(tmp_path / "o" / "slices" / "overlay_z010.pgm").shape == (32, 32)
        assert "slices=4" in out

    def test_gradcam_shape_mismatch(self, tmp_path, capsys):
        write_array(np.zeros((4, 4, 4)), tmp_path / "v.gmgv")
        cfg = phantom_run_config()
        save_checkpoint(build_model(cfg.model_config("extractor", (8, 8, 8), 0)), tmp_path / "m.gmgm")
        code, _, err = run(["gradcam", "--checkpoint", tmp_path / "m.gmgm", "--volume", tmp_path / "v.gmgv", "--out", tmp_path / "o"], capsys)
        assert code == 1 and "does not match" in err
