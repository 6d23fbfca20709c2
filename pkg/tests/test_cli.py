import json

import numpy as np
import pytest
import yaml

from helpers import TINY
from veloform import cli
from veloform.gradcheck import CheckResult, GradCheckReport
from veloform.io import read_obj, read_ply


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--scene", "translation", "--points", 400, "--matches", 60, "--seed", 3, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert run("train", "--config", cfg, "--data", data_dir, "--set", "steps_per_pair=100", "--set", "lr_fields=5e-4", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def frames(tmp_path_factory, trained):
    out = tmp_path_factory.mktemp("frames")
    assert run("interpolate", "--checkpoint", trained / "checkpoint.vfm", "--resolution", 24, "--out", out) == 0
    return out


class TestGenData:
    def test_outputs(self, data_dir):
        for name in ("source.ply", "target.ply", "matches.txt", "scene.json", "manifest.json"):
            assert (data_dir / name).exists()
        assert len(read_ply(data_dir / "source.ply").points) == 400
        assert json.loads((data_dir / "scene.json").read_text())["scene"] == "translation"

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert run("gen-data", "--scene", "bending", "--points", 200, "--matches", 20,
                       "--noise", 0.01, "--drop", 0.2, "--seed", 5, "--out", tmp_path / d) == 0
        for f in ("source.ply", "target.ply", "matches.txt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_scene_params(self, tmp_path):
        assert run("gen-data", "--scene", "translation", "--v", "0.1,0,0", "--points", 50,
                   "--matches", 5, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "scene.json").read_text())["v"] == [0.1, 0, 0]

    def test_unknown_scene(self, tmp_path, capsys):
        assert run("gen-data", "--scene", "twist", "--out", tmp_path) == 1
        assert "twist" in capsys.readouterr().err

    def test_flag_for_other_scene(self, tmp_path):
        assert run("gen-data", "--scene", "rotation", "--k", 0.5, "--out", tmp_path) == 1

    def test_too_many_matches(self, tmp_path):
        assert run("gen-data", "--scene", "translation", "--points", 10, "--matches", 20, "--out", tmp_path) == 1

    def test_bad_vector(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--scene", "translation", "--v", "1,2", "--out", tmp_path)
        assert exc.value.code == 1


class TestTrain:
    def test_outputs(self, trained):
        for name in ("checkpoint.vfm", "train_log.jsonl", "losses.csv", "losses.png", "manifest.json"):
            assert (trained / name).exists()
        rows = (trained / "losses.csv").read_text().splitlines()
        assert rows[0].startswith("step,pair_id,L_i") and len(rows) == 101
        man = json.loads((trained / "manifest.json").read_text())
        assert man["command"] == "train" and man["config"]["steps_per_pair"] == 100
        assert len(man["inputs"]) == 3

    def test_unknown_key(self, tmp_path, data_dir, capsys):
        assert run("train", "--data", data_dir, "--set", "lerning_rate=1", "--out", tmp_path) == 1
        assert "lerning_rate" in capsys.readouterr().err

    def test_bad_set_syntax(self, tmp_path, data_dir):
        assert run("train", "--data", data_dir, "--set", "steps", "--out", tmp_path) == 1

    def test_missing_matches(self, tmp_path, data_dir, capsys):
        a, b = data_dir / "source.ply", data_dir / "target.ply"
        assert run("train", "--frames", a, b, "--out", tmp_path) == 1
        assert "lambda_m" in capsys.readouterr().err

    def test_no_input(self, tmp_path):
        assert run("train", "--out", tmp_path) == 1

    def test_resume(self, tmp_path, data_dir):
        sets = [x for k, v in TINY.items() for x in ("--set", f"{k}={v}")]
        assert run("train", "--data", data_dir, *sets, "--set", "steps_per_pair=4", "--out", tmp_path / "a") == 0
        assert run("train", "--data", data_dir, *sets, "--set", "steps_per_pair=2", "--out", tmp_path / "b") == 0
        assert run("train", "--data", data_dir, *sets, "--set", "steps_per_pair=4", "--resume", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "checkpoint.vfm").read_bytes() == (tmp_path / "b" / "checkpoint.vfm").read_bytes()

    def test_resume_missing(self, tmp_path, data_dir):
        assert run("train", "--data", data_dir, "--resume", "--out", tmp_path) == 1


class TestInterpolate:
    def test_eleven_frames(self, frames):
        assert len(list(frames.glob("frame_*.obj"))) == 11
        assert len(list(frames.glob("frame_*.ply"))) == 11
        side = json.loads((frames / "interpolation.json").read_text())
        assert side["grid"] == pytest.approx(np.linspace(0, 1, 11))
        assert side["summary"]["mesh_count"] == 11
        assert len(read_obj(frames / "frame_0005.obj").faces) > 0

    def test_outside_unit_interval(self, tmp_path, trained, capsys):
        ck = trained / "checkpoint.vfm"
        assert run("interpolate", "--checkpoint", ck, "--t", "0.5,1.2", "--out", tmp_path) == 1
        assert "--extrapolate" in capsys.readouterr().err
        assert run("interpolate", "--checkpoint", ck, "--t", "0.5,1.2", "--extrapolate",
                   "--resolution", 16, "--out", tmp_path) == 0
        side = json.loads((tmp_path / "interpolation.json").read_text())
        assert [("mesh" in f) for f in side["frames"]] == [True, False]

    def test_unknown_pair(self, tmp_path, trained, capsys):
        assert run("interpolate", "--checkpoint", trained / "checkpoint.vfm", "--pair", 3, "--out", tmp_path) == 1
        assert "known ids: [0]" in capsys.readouterr().err

    def test_t_and_frames_exclusive(self, tmp_path, trained):
        assert run("interpolate", "--checkpoint", trained / "checkpoint.vfm", "--t", "0.5",
                   "--frames", 3, "--out", tmp_path) == 1

    def test_external_cloud_matches_advection(self, tmp_path, trained):
        from veloform.inference import advect_points
        from veloform.training import load_state

        pts = np.random.default_rng(0).uniform(-0.3, 0.3, size=(50, 3))
        ext = tmp_path / "ext.xyz"
        np.savetxt(ext, pts)
        out = tmp_path / "o"
        assert run("interpolate", "--checkpoint", trained / "checkpoint.vfm", "--external-cloud", ext,
                   "--t", "0,0.5,1", "--no-meshes", "--out", out) == 0
        state = load_state(trained / "checkpoint.vfm")
        norm = state.transform.apply(pts)
        ref = advect_points(norm, state.pair_code(0).detach(), state.velocity, 0.0, 1.0, state.integrator)
        got = read_ply(out / "frame_0002.ply").points
        np.testing.assert_allclose(got, state.transform.inverse(ref.points), atol=1e-5)
        assert not list(out.glob("*.obj"))


class TestEvaluate:
    def test_identical_is_zero(self, tmp_path, frames):
        assert run("evaluate", "--pred", frames, "--gt", frames, "--samples", 2000, "--out", tmp_path) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["cd_max"] == 0 and rep["hd_max"] == 0 and rep["p_rmse"] == 0
        for name in ("metrics.csv", "area.png", "distances.png", "manifest.json"):
            assert (tmp_path / name).exists()

    def test_scene_reference(self, tmp_path, frames, data_dir):
        assert run("evaluate", "--pred", frames, "--scene", data_dir / "scene.json", "--resolution", 24,
                   "--samples", 2000, "--out", tmp_path) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["frames"] == 11 and "p_rmse" in rep

    def test_prmse_absent_without_alignment(self, tmp_path, frames):
        gt = tmp_path / "gt"
        gt.mkdir()
        for f in frames.glob("frame_*.obj"):
            (gt / f.name).write_bytes(f.read_bytes())
        assert run("evaluate", "--pred", frames, "--gt", gt, "--samples", 500, "--out", tmp_path / "r") == 0
        rep = json.loads((tmp_path / "r" / "report.json").read_text())
        assert "p_rmse" not in rep and "cd_mean" in rep and "sa_sigma" in rep

    def test_frame_count_mismatch(self, tmp_path, frames, capsys):
        gt = tmp_path / "gt"
        gt.mkdir()
        (gt / "frame_0000.obj").write_bytes((frames / "frame_0000.obj").read_bytes())
        assert run("evaluate", "--pred", frames, "--gt", gt, "--out", tmp_path / "r") == 1
        assert "mismatch" in capsys.readouterr().err

    def test_needs_reference(self, tmp_path, frames):
        assert run("evaluate", "--pred", frames, "--out", tmp_path) == 1

    def test_empty_pred(self, tmp_path):
        assert run("evaluate", "--pred", tmp_path, "--scene", "translation", "--out", tmp_path) == 1


class TestCheckGrads:
    def test_pass_exit_zero(self, tmp_path, trained, capsys):
        assert run("check-grads", "--checkpoint", trained / "checkpoint.vfm", "--probes", 10,
                   "--loss-probes", 3, "--out", tmp_path) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 13 and all(l.startswith("PASS") for l in lines)
        assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is True

    def test_failure_exit_two(self, monkeypatch, capsys):
        bad = GradCheckReport([CheckResult("velocity_jacobian", 0.5, 1e-4, 1)])
        monkeypatch.setattr("veloform.gradcheck.run_check_grads", lambda *a, **k: bad)
        assert run("check-grads") == 2
        assert "velocity_jacobian" in capsys.readouterr().err


class TestMisc:
    def test_thread_cap(self, monkeypatch):
        import torch

        monkeypatch.setenv("VELOFORM_THREADS", "1")
        assert cli.apply_thread_cap() == 1
        assert torch.get_num_threads() == 1

    def test_thread_cap_invalid(self, monkeypatch, tmp_path):
        monkeypatch.setenv("VELOFORM_THREADS", "zero")
        assert run("gen-data", "--scene", "translation", "--out", tmp_path) == 1

    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 1

    def test_module_entry(self):
        import subprocess
        import sys

        res = subprocess.run([sys.executable, "-m", "veloform", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and "veloform" in res.stdout
