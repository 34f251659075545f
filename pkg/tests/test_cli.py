import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from stein_scanmatch.cli import main, parse_tum, tum_line
from stein_scanmatch.config import load_config, parse_config
from stein_scanmatch.errors import ConfigError
from stein_scanmatch.manifold import se3_exp
from stein_scanmatch.pointcloud import load_cloud


def write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def run(argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- config


def test_unknown_key_named(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", {"solver": {"particle_cont": 3}})
    assert run(["align", "--config", cfg, "--out", tmp_path]) == 2
    assert "solver.particle_cont" in capsys.readouterr().err


def test_unknown_section_named():
    with pytest.raises(ConfigError, match="solvr"):
        parse_config({"solvr": {}})


def test_json_config_accepted(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "solver": {"particle_count": 7, "huber_delta": "none"}}))
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.solver.particle_count == 7 and cfg.solver.huber_delta is None


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        parse_config({"scene": {"density": 0}})
    with pytest.raises(ConfigError):
        parse_config({"seed": -1})


def test_tum_roundtrip():
    T = se3_exp(np.array([0.1, -0.2, 0.3, 1.0, 2.0, -3.0]))
    t, back = parse_tum(tum_line(1.5, T))
    assert t == 1.5 and np.allclose(back.matrix(), T.matrix(), atol=1e-8)


# ---------------------------------------------------------------- align


def test_align_identical_clouds(tmp_path, rng):
    pts = rng.normal(size=(100, 3))
    for name in ("a.csv", "b.csv"):
        np.savetxt(tmp_path / name, pts, delimiter=",", fmt="%.17g")
    cfg = write_cfg(tmp_path / "c.yaml", {"io": {"source": str(tmp_path / "a.csv"), "target": str(tmp_path / "b.csv")}, "solver": {"init_sigma": [0.0] * 6}})
    assert run(["align", "--config", cfg, "--particles", 1, "--out", tmp_path / "o"]) == 0
    rep = json.loads((tmp_path / "o" / "align_report.json").read_text())
    assert rep["converged"] is True
    assert rep["pose_tum"] == "0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 1.000000000"
    assert (tmp_path / "o" / "update_norms.csv").read_text().startswith("iteration,mean_sq_update")


@pytest.fixture(scope="module")
def corridor_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("cor")
    return write_cfg(d / "c.yaml", {"scene": {"kind": "corridor", "density": 8, "noise_sigma": 0.02, "offset": [0, 0, 0.005, 0.1, 0.03, 0.0]}, "solver": {"particle_count": 10}})


def test_align_corridor_covariance_dominated_by_axis(tmp_path, corridor_cfg):
    assert run(["align", "--config", corridor_cfg, "--out", tmp_path]) == 0
    cov = np.loadtxt(tmp_path / "covariance.csv", delimiter=",", skiprows=1)
    tdiag = np.diag(cov)[3:]
    assert tdiag[0] == tdiag.max() and tdiag[0] > 10 * max(tdiag[1], tdiag[2])


def test_align_svn_needs_fewer_iterations_than_svgd(tmp_path, corridor_cfg):
    its = {}
    for mode in ("svn", "svgd"):
        assert run(["align", "--config", corridor_cfg, "--mode", mode, "--seed", 2, "--out", tmp_path / mode]) == 0
        its[mode] = json.loads((tmp_path / mode / "align_report.json").read_text())["iterations"]
    assert its["svn"] <= its["svgd"]


def test_align_solver_failure_exit_1(tmp_path, capsys):
    np.savetxt(tmp_path / "a.csv", np.eye(3), delimiter=",")
    cfg = write_cfg(tmp_path / "c.yaml", {"io": {"source": str(tmp_path / "a.csv"), "target": str(tmp_path / "a.csv")}})
    assert run(["align", "--config", cfg, "--out", tmp_path]) == 1
    assert "error" in capsys.readouterr().err


def test_align_missing_file_exit_2(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"io": {"source": str(tmp_path / "nope.csv"), "target": str(tmp_path / "nope.csv")}})
    assert run(["align", "--config", cfg, "--out", tmp_path]) == 2


def test_bad_flag_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        run(["align", "--mode", "adam"])
    assert e.value.code == 2


# ------------------------------------------------------------ gen-scene


def test_gen_scene_files_and_roundtrip(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"scene": {"kind": "corridor", "density": 2, "noise_sigma": 0.01, "offset": [0, 0, 0.01, 0.2, 0, 0]}})
    assert run(["gen-scene", "--config", cfg, "--out", tmp_path / "s"]) == 0
    for name in ("source.csv", "target.csv", "gt.tum"):
        assert (tmp_path / "s" / name).exists()
    src = load_cloud(tmp_path / "s" / "source.csv")
    (tmp_path / "again.csv").write_text("".join(f"{x:.9g},{y:.9g},{z:.9g}\n" for x, y, z in src.points))
    assert np.array_equal(load_cloud(tmp_path / "again.csv").points, src.points)
    _, gt = parse_tum((tmp_path / "s" / "gt.tum").read_text())
    assert np.allclose(gt.matrix(), se3_exp(np.array([0, 0, 0.01, 0.2, 0, 0])).matrix(), atol=1e-8)


def test_gen_scene_repeatable(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"seed": 7, "scene": {"kind": "blobs", "density": 5, "seed": 7}})
    for d in ("a", "b"):
        assert run(["gen-scene", "--config", cfg, "--out", tmp_path / d]) == 0
    for name in ("source.csv", "target.csv", "gt.tum"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_scene_density_zero_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", {"scene": {"kind": "box", "density": 0}})
    assert run(["gen-scene", "--config", cfg, "--out", tmp_path]) == 2
    assert "density" in capsys.readouterr().err


# ------------------------------------------------------------------ fuse


def test_fuse_from_sequence_dir_static(tmp_path):
    doc = {
        "scene": {"kind": "box", "density": 15},
        "trajectory": {"shape": "static", "duration": 2.0, "scan_rate": 5, "imu_rate": 100, "accel_noise_density": 0.0, "gyro_noise_density": 0.0, "start": [0.2, 0.1, 0.0], "shared_sample": True},
        "solver": {"particle_count": 8, "max_iterations": 10},
    }
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    assert run(["gen-scene", "--config", cfg, "--sequence", "--out", tmp_path / "g"]) == 0
    seq = tmp_path / "g" / "sequence"
    doc["io"] = {"scan_dir": str(seq)}
    cfg2 = write_cfg(tmp_path / "c2.yaml", doc)
    assert run(["fuse", "--config", cfg2, "--out", tmp_path / "f"]) == 0
    traj = np.loadtxt(tmp_path / "f" / "trajectory.tum")
    assert len(traj) == 11
    assert np.abs(traj[:, 1:4] - [0.2, 0.1, 0.0]).max() < 1e-3
    gains = np.loadtxt(tmp_path / "f" / "kalman_gain.csv", delimiter=",", skiprows=1)
    assert gains.shape == (11, 8)
    covs = np.loadtxt(tmp_path / "f" / "covariances.csv", delimiter=",", skiprows=1)
    assert covs.shape == (11, 37)
    rep = json.loads((tmp_path / "f" / "fuse_report.json").read_text())
    assert rep["final_translation_error"] < 1e-3 and rep["nne_trans"] is not None


def test_fuse_lidar_only_without_imu(tmp_path):
    doc = {
        "scene": {"kind": "blobs", "density": 6, "seed": 1},
        "trajectory": {"shape": "line", "speed": 0.5, "duration": 1.0, "scan_rate": 2, "sensor_range": 8.0},
        "solver": {"particle_count": 3},
    }
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    assert run(["gen-scene", "--config", cfg, "--sequence", "--out", tmp_path / "g"]) == 0
    (tmp_path / "g" / "sequence" / "imu.csv").unlink()
    doc["io"] = {"scan_dir": str(tmp_path / "g" / "sequence")}
    cfg2 = write_cfg(tmp_path / "c2.yaml", doc)
    assert run(["fuse", "--config", cfg2, "--propagation", "constant-velocity", "--out", tmp_path / "f"]) == 0
    # the IMU mode needs a stream
    assert run(["fuse", "--config", cfg2, "--propagation", "imu", "--out", tmp_path / "f2"]) == 2


# ---------------------------------------------------------------- oracle


def test_oracle_report_echoes_seed_and_hash(tmp_path):
    doc = {
        "seed": 11,
        "scene": {"kind": "box", "density": 15, "resample_source": False},
        "oracle": {"samples": 12, "trials": 2, "perturbation": [0.01, 0.05], "sensor_sigma": 0.01},
        "solver": {"particle_count": 3, "max_iterations": 10},
    }
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    assert run(["oracle", "--config", cfg, "--out", tmp_path]) == 0
    rep = json.loads((tmp_path / "oracle_report.json").read_text())
    assert rep["seed"] == 11
    assert rep["scene_hash"] == parse_config(doc).scene.digest()
    assert rep["config"]["oracle"]["samples"] == 12
    assert set(rep["consistency"]) >= {"kl_trans", "nne_trans"}


def test_ablation_runs(tmp_path):
    doc = {
        "scene": {"kind": "box", "density": 10, "resample_source": False},
        "oracle": {"samples": 12, "trials": 1, "perturbation": [0.01, 0.05], "sensor_sigma": 0.01},
        "ablation": {"particle_counts": [1, 3], "seeds": [0], "modes": ["svn"]},
        "solver": {"max_iterations": 5},
    }
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    assert run(["ablation", "--config", cfg, "--out", tmp_path]) == 0
    rep = json.loads((tmp_path / "ablation_report.json").read_text())
    assert rep["summary"][0]["kl_trans"] is None and rep["summary"][1]["kl_trans"] is not None


# ---------------------------------------------------------------- logging


def test_log_env_and_console_script(tmp_path):
    doc = {"scene": {"kind": "box", "density": 5}}
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    env = {"STEIN_SCANMATCH_LOG": "debug", "PATH": "/usr/bin:/bin"}
    r = subprocess.run(
        [sys.executable, "-m", "stein_scanmatch.cli", "gen-scene", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
        env=env,
    )
    assert r.returncode == 0
    assert r.stdout == ""
