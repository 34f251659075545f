"""Command-line entry point: ``stein-scanmatch <command> [options]``.

Exit codes: 0 success, 1 algorithmic failure, 2 bad input or configuration.
Reports are JSON with sorted keys and no timings (except ``ablation``), so runs
with the same seed and ``--threads 1`` are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, override, resolved
from .errors import ScanMatchError
from .fusion import initial_state, run_fusion
from .manifold import Pose, quaternion_to_rotation, rotation_to_quaternion, se3_log
from .oracle_bench import ablation_sweep, aggregate, consistency, mc_icp_distribution, nne, run_estimates
from .pointcloud import PointCloud, load_cloud, save_cloud, voxel_downsample
from .scenes import generate_pair, generate_trajectory
from .stein_solver import solve_icp

log = logging.getLogger("stein_scanmatch")

LOG_ENV = "STEIN_SCANMATCH_LOG"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


# ----------------------------------------------------------------- helpers


def _setup_logging():
    name = os.environ.get(LOG_ENV, "warn").strip().lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(name, logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _num(x):
    """Recursively convert numpy values into plain JSON types."""
    if isinstance(x, dict):
        return {str(k): _num(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    if isinstance(x, np.ndarray):
        return _num(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_num(doc), sort_keys=True, indent=2) + "\n")


def tum_line(t: float, pose: Pose) -> str:
    q = rotation_to_quaternion(pose.rotation)
    vals = [t, *pose.translation, *q]
    return " ".join(f"{v:.9f}" for v in vals)


def parse_tum(line: str) -> tuple[float, Pose]:
    f = [float(v) for v in line.split()]
    if len(f) != 8:
        raise ValueError(f"TUM line needs 8 fields, got {len(f)}")
    return f[0], Pose(quaternion_to_rotation(np.array(f[4:8])), np.array(f[1:4]))


def _write_matrix_csv(path: Path, rows, header: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(np.asarray(rows, dtype=float)), delimiter=",", fmt="%.9g", header=header, comments="")


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _base_report(command: str, cfg: RunConfig, scene_hash: str) -> dict:
    return {"command": command, "version": __version__, "seed": cfg.seed, "scene_hash": scene_hash, "config": resolved(cfg)}


# ---------------------------------------------------------------- commands


def cmd_align(cfg: RunConfig, out: Path) -> dict:
    io = cfg.io
    if io.source or io.target:
        if not (io.source and io.target):
            raise ValueError("align needs both io.source and io.target")
        source = load_cloud(io.source, io.format)
        target = load_cloud(io.target, io.format)
        scene_hash = _file_digest(io.source, io.target)
        gt = None
    else:
        pair = generate_pair(cfg.scene)
        source, target = PointCloud(pair.source), PointCloud(pair.target)
        scene_hash = cfg.scene.digest()
        gt = pair.gt
    if io.voxel:
        source = voxel_downsample(source, io.voxel)
    res = solve_icp(Pose.identity(), source, target, cfg.solver, seed=cfg.seed)

    _write_matrix_csv(out / "update_norms.csv", np.column_stack([np.arange(1, len(res.update_norms) + 1), res.update_norms]), "iteration,mean_sq_update")
    _write_matrix_csv(out / "covariance.csv", res.covariance, "theta_x,theta_y,theta_z,x,y,z")
    report = _base_report("align", cfg, scene_hash)
    report.update(
        pose_tum=tum_line(0.0, res.pose),
        pose_matrix=res.pose.matrix(),
        covariance=res.covariance,
        icp_covariance=res.icp_covariance,
        iterations=res.iterations,
        converged=res.converged,
        final_rms=res.final_rms,
        update_norms=list(res.update_norms),
        frozen_events=res.frozen_events,
        source_points=len(source),
        target_points=len(target),
    )
    if gt is not None:
        err = se3_log(gt.inverse() @ res.pose)
        report["error"] = {"rotation": float(np.linalg.norm(err[:3])), "translation": float(np.linalg.norm(err[3:]))}
    write_json(out / "align_report.json", report)
    return report


def _load_sequence(scan_dir: Path, imu_path: str | None):
    """Read a scan directory: index.csv (t,file), map.csv, optional imu.csv, gt.tum, initial.json."""
    idx = scan_dir / "index.csv"
    if not idx.exists():
        raise FileNotFoundError(f"{idx} not found")
    scans = []
    for n, line in enumerate(idx.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            t_str, name = line.split(",", 1)
            t = float(t_str)
        except ValueError:
            raise ValueError(f"{idx}: line {n}: expected 't,file'") from None
        c = load_cloud(scan_dir / name.strip())
        scans.append(PointCloud(c.points, t))
    world_map = load_cloud(scan_dir / "map.csv")
    imu = None
    ip = Path(imu_path) if imu_path else scan_dir / "imu.csv"
    if ip.exists():
        imu = np.loadtxt(ip, delimiter=",", comments="#", ndmin=2)
        if imu.shape[1] != 7:
            raise ValueError(f"{ip}: IMU rows need 7 columns t,ax,ay,az,gx,gy,gz")
    gt = None
    if (scan_dir / "gt.tum").exists():
        gt = [parse_tum(l)[1] for l in (scan_dir / "gt.tum").read_text().splitlines() if l.strip()]
    init_pose, init_vel = Pose.identity(), np.zeros(3)
    if (scan_dir / "initial.json").exists():
        doc = json.loads((scan_dir / "initial.json").read_text())
        init_pose = parse_tum(doc["pose_tum"])[1]
        init_vel = np.asarray(doc.get("velocity", [0.0, 0.0, 0.0]), dtype=float)
    files = [idx, scan_dir / "map.csv"] + ([ip] if imu is not None else [])
    return scans, world_map, imu, gt, init_pose, init_vel, _file_digest(*files)


def _synthetic_sequence(cfg: RunConfig):
    data = generate_trajectory(cfg.trajectory.to_spec(cfg.seed), cfg.scene)
    scans = [PointCloud(s, float(t)) for s, t in zip(data.scans, data.scan_times)]
    return data, scans


def cmd_fuse(cfg: RunConfig, out: Path) -> dict:
    if cfg.io.scan_dir:
        scans, world_map, imu, gt, p0, v0, scene_hash = _load_sequence(Path(cfg.io.scan_dir), cfg.io.imu)
    else:
        data, scans = _synthetic_sequence(cfg)
        world_map, imu, gt = PointCloud(data.world_map), data.imu, data.gt_poses
        p0, v0 = data.gt_poses[0], data.gt_velocity0
        scene_hash = hashlib.sha256(
            (cfg.scene.digest() + json.dumps(resolved(cfg)["trajectory"], sort_keys=True)).encode()
        ).hexdigest()[:16]
    if not scans:
        raise ValueError("no scans to fuse")
    state = initial_state(p0, v0, scans[0].timestamp)
    res = run_fusion(scans, world_map, state, cfg.solver, cfg.filter, imu=imu, seed=cfg.seed)

    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.tum").write_text("".join(tum_line(t, p) + "\n" for t, p in zip(res.times, res.poses)))
    _write_matrix_csv(
        out / "covariances.csv",
        [[t, *c.ravel()] for t, c in zip(res.times, res.covariances)],
        "t," + ",".join(f"c{i}{j}" for i in range(6) for j in range(6)),
    )
    _write_matrix_csv(
        out / "kalman_gain.csv",
        [[t, g, *d] for t, g, d in zip(res.times, res.gain_norms, res.gain_diagonals)],
        "t,frobenius,k_px,k_py,k_pz,k_rx,k_ry,k_rz",
    )
    report = _base_report("fuse", cfg, scene_hash)
    report.update(
        scans=len(res.times),
        iterations=res.iterations,
        gain_norms=res.gain_norms,
        final_pose_tum=tum_line(res.times[-1], res.poses[-1]),
    )
    if gt is not None and len(gt) == len(res.poses):
        errs = np.array([p.translation - g.translation for p, g in zip(res.poses, gt)])
        covs = np.array([c[3:, 3:] for c in res.covariances])
        report["final_translation_error"] = float(np.linalg.norm(errs[-1]))
        report["mean_translation_error"] = float(np.mean(np.linalg.norm(errs, axis=1)))
        try:
            report["nne_trans"] = nne(errs, covs)
        except np.linalg.LinAlgError:
            # fewer than 7 particles give a rank-deficient sample covariance
            log.warning("pose covariance is singular; nne_trans not reported")
            report["nne_trans"] = None
    write_json(out / "fuse_report.json", report)
    return report


def cmd_oracle(cfg: RunConfig, out: Path) -> dict:
    pair = generate_pair(cfg.scene)
    mc = mc_icp_distribution(pair, cfg.oracle, seed=cfg.seed, solver=cfg.solver)
    trials = run_estimates(pair, cfg.solver, cfg.oracle, seed=cfg.seed)
    rep = consistency(trials, mc)
    report = _base_report("oracle", cfg, cfg.scene.digest())
    report.update(
        consistency=rep.as_dict(),
        consistency_unfiltered=consistency(trials, mc, filtered=False).as_dict(),
        oracle={
            "converged": int(mc.converged.sum()),
            "kept": int(len(mc.kept)),
            "mean": mc.filtered_mean,
            "covariance": mc.filtered_covariance,
        },
        estimates={"errors": trials.errors, "covariances": trials.covariances, "iterations": trials.iterations},
    )
    _write_matrix_csv(out / "oracle_samples.csv", np.column_stack([mc.samples, mc.converged]), "theta_x,theta_y,theta_z,x,y,z,converged")
    write_json(out / "oracle_report.json", report)
    return report


def cmd_ablation(cfg: RunConfig, out: Path) -> dict:
    from dataclasses import replace

    def make_pair(seed):
        return generate_pair(replace(cfg.scene, seed=seed))

    rows = ablation_sweep(make_pair, cfg.ablation.particle_counts, cfg.ablation.seeds, cfg.solver, cfg.oracle, modes=cfg.ablation.modes)
    report = _base_report("ablation", cfg, cfg.scene.digest())
    report.update(rows=[r.as_dict() for r in rows], summary=aggregate(rows), note="runtime fields are wall-clock and vary between runs")
    write_json(out / "ablation_report.json", report)
    return report


def cmd_gen_scene(cfg: RunConfig, out: Path, sequence: bool = False) -> dict:
    pair = generate_pair(cfg.scene)
    save_cloud(out / "source.csv", PointCloud(pair.source))
    save_cloud(out / "target.csv", PointCloud(pair.target))
    (out / "gt.tum").write_text(tum_line(0.0, pair.gt) + "\n")
    report = _base_report("gen-scene", cfg, cfg.scene.digest())
    report.update(source_points=len(pair.source), target_points=len(pair.target), gt_tum=tum_line(0.0, pair.gt))
    if sequence:
        data, scans = _synthetic_sequence(cfg)
        seq = out / "sequence"
        seq.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, s in enumerate(scans):
            name = f"scan_{i:05d}.csv"
            save_cloud(seq / name, s)
            lines.append(f"{s.timestamp:.9f},{name}\n")
        (seq / "index.csv").write_text("".join(lines))
        save_cloud(seq / "map.csv", PointCloud(data.world_map))
        np.savetxt(seq / "imu.csv", data.imu, delimiter=",", fmt="%.9g", header="t,ax,ay,az,gx,gy,gz")
        (seq / "gt.tum").write_text("".join(tum_line(t, p) + "\n" for t, p in zip(data.scan_times, data.gt_poses)))
        write_json(seq / "initial.json", {"pose_tum": tum_line(float(data.scan_times[0]), data.gt_poses[0]), "velocity": data.gt_velocity0})
        report["sequence_scans"] = len(scans)
    write_json(out / "scene.json", report)
    return report


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stein-scanmatch", description="Particle-based ICP with uncertainty and ESKF fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--mode", choices=("svn", "svgd"), help="particle update rule")
    common.add_argument("--particles", type=int, help="particle count K")
    common.add_argument("--noise", choices=("adaptive", "fixed"), help="filter measurement noise")
    common.add_argument("--propagation", choices=("imu", "constant-velocity"), help="filter motion model")
    common.add_argument("--threads", type=int, help="worker threads for particle evaluation")
    common.add_argument("--out", help="output directory (overrides io.out)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("align", parents=[common], help="register a source cloud to a target cloud")
    sub.add_parser("fuse", parents=[common], help="run the scan-matching filter over a scan sequence")
    sub.add_parser("oracle", parents=[common], help="score covariance consistency against a Monte-Carlo reference")
    sub.add_parser("ablation", parents=[common], help="sweep particle counts and update modes")
    g = sub.add_parser("gen-scene", parents=[common], help="write a synthetic cloud pair (and optionally a sequence)")
    g.add_argument("--sequence", action="store_true", help="also write a scan/IMU sequence for 'fuse'")
    return p


COMMANDS = {"align": cmd_align, "fuse": cmd_fuse, "oracle": cmd_oracle, "ablation": cmd_ablation}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = override(
            cfg,
            seed=args.seed,
            **{
                "solver.mode": args.mode,
                "solver.particle_count": args.particles,
                "solver.threads": args.threads,
                "filter.noise_mode": args.noise,
                "filter.propagation": args.propagation,
                "io.out": args.out,
            },
        )
        if cfg.seed < 0:
            raise ValueError("seed must be non-negative")
        out = Path(cfg.io.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-scene":
            cmd_gen_scene(cfg, out, sequence=args.sequence)
        else:
            COMMANDS[args.command](cfg, out)
    except ScanMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        # ConfigError, CloudFormatError and EmptyCloudError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
