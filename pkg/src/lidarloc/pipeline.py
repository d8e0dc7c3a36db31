"""End-to-end commands: synth, train, eval, bench and invariance.

Every command takes a :class:`RunConfig`, writes into ``config.out_dir`` and
returns an in-memory result. Reruns with the same config reproduce every
output file bitwise, except ``bench_timing.csv`` which holds wall-clock
measurements.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .encoder import LoSWAttConfig, ModelConfig, desk_config, forward, init_weights, loswatt_layer
from .errors import EmptyReportError, FileFormatError, InvalidInputError, NoConsensusError
from .geometry import Pose, pose_error, yaw_rotation
from .invariance import InvarianceReport, run_suite
from .io import load_checkpoint, load_poses, load_scan, save_checkpoint, save_poses, save_scan
from .pose_solver import CorrespondenceSet, ransac_pose
from .synthetic import SensorConfig, TrainSample, flight_poses, simulate_scan, synth_scene
from .training import TrainResult, fit_normalization, train, write_loss_csv

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.mlck"
LOSS_CSV = "loss.csv"
SNAPSHOT = "config.txt"


# ---------------------------------------------------------------------------
# datasets


def load_dataset(directory) -> list:
    """``[(scan_id, TrainSample)]`` from ``poses.csv`` and ``<scan_id>.mlsc``."""
    directory = Path(directory)
    poses = load_poses(directory / "poses.csv")
    out = []
    for scan_id, pose in poses.items():
        path = directory / f"{scan_id}.mlsc"
        if not path.is_file():
            raise FileFormatError(f"scan file for {scan_id!r} not found: {path}")
        out.append((scan_id, TrainSample(load_scan(path), pose)))
    return out


def save_dataset(directory, dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scan_id, sample in dataset:
        save_scan(directory / f"{scan_id}.mlsc", sample.cloud)
    save_poses(directory / "poses.csv", {scan_id: s.gt_pose for scan_id, s in dataset})


def _sensor(cfg: RunConfig) -> SensorConfig:
    return SensorConfig(
        channels=cfg.sensor_channels,
        azimuth_steps=cfg.sensor_azimuth,
        max_range=cfg.sensor_max_range,
        range_noise=cfg.range_noise,
    )


def _scene(cfg: RunConfig):
    return synth_scene(cfg.scene_seed, cfg.scene_extent, cfg.scene_buildings)


def _trajectory(cfg: RunConfig, scene):
    return flight_poses(scene, cfg.synth_scans, cfg.trajectory_seed, altitude=cfg.altitude, yaw_mode=cfg.yaw_mode)


def _scan_set(cfg: RunConfig, scene, poses, seed_base):
    sensor = _sensor(cfg)
    return [
        (f"scan_{i:04d}", simulate_scan(scene, pose, sensor, seed=seed_base + i))
        for i, pose in enumerate(poses)
    ]


def synthetic_dataset(cfg: RunConfig) -> list:
    scene = _scene(cfg)
    return _scan_set(cfg, scene, _trajectory(cfg, scene), cfg.seed)


def synthetic_test_set(cfg: RunConfig) -> list:
    """Trajectory positions re-posed by ``test_yaw`` / ``test_altitude_offset``."""
    scene = _scene(cfg)
    poses = _trajectory(cfg, scene)
    if cfg.test_yaw == "same" and cfg.test_altitude_offset == 0:
        return _scan_set(cfg, scene, poses, cfg.seed)
    rng = np.random.default_rng(cfg.test_seed)
    moved = []
    for pose in poses:
        dz = rng.uniform(-cfg.test_altitude_offset, cfg.test_altitude_offset)
        if cfg.test_yaw == "random":
            rot = yaw_rotation(rng.uniform(0.0, 2.0 * math.pi)).rotation
        else:
            rot = pose.rotation
        moved.append(Pose(rot, pose.translation + [0.0, 0.0, dz]))
    return _scan_set(cfg, scene, moved, cfg.test_seed)


def training_data(cfg: RunConfig) -> list:
    return synthetic_dataset(cfg) if cfg.synthetic else load_dataset(cfg.data_dir)


def evaluation_data(cfg: RunConfig) -> list:
    if cfg.test_dir:
        return load_dataset(cfg.test_dir)
    if cfg.synthetic:
        return synthetic_test_set(cfg)
    return load_dataset(cfg.data_dir)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig) -> Path:
    """Write the synthetic training set (and a re-posed test set if any)."""
    if not cfg.synthetic:
        raise InvalidInputError("synth needs synth_scans > 0")
    out = Path(cfg.out_dir)
    save_dataset(out / "train", synthetic_dataset(cfg))
    if cfg.test_yaw != "same" or cfg.test_altitude_offset != 0:
        save_dataset(out / "test", synthetic_test_set(cfg))
    (out / SNAPSHOT).write_text(cfg.to_text())
    return out


# ---------------------------------------------------------------------------
# train


@dataclass
class TrainOutput:
    result: TrainResult
    model: ModelConfig
    checkpoint: Path


def cmd_train(cfg: RunConfig, dataset=None) -> TrainOutput:
    """Fit the model and write checkpoint, loss curve and config snapshot.

    The coordinate normalization (offset, scale) is always fitted to the
    training targets and stored in the checkpoint's model config.
    """
    data = training_data(cfg) if dataset is None else dataset
    if not data:
        raise InvalidInputError("training set is empty")
    samples = [TrainSample(np.asarray(s.cloud, dtype=np.float64), s.gt_pose) for _, s in data]
    offset, scale = fit_normalization(samples)
    model = replace(cfg.model_config(), coord_offset=offset, coord_scale=scale)
    result = train(model, samples, cfg.epochs, cfg.batch_size, seed=cfg.seed, lr=cfg.lr, log_every=50)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT
    save_checkpoint(ckpt, result.weights)
    write_loss_csv(out / LOSS_CSV, result.losses)
    (out / SNAPSHOT).write_text(cfg.to_text())
    return TrainOutput(result, model, ckpt)


# ---------------------------------------------------------------------------
# eval


@dataclass(frozen=True)
class EvalRow:
    scan_id: str
    status: str  # "ok" or "no_consensus"
    position_error: float
    orientation_error: float
    inliers: int
    est: Pose | None
    gt: Pose
    # centroid-translation, identity-rotation stand-in for failed scans
    fallback_position_error: float
    fallback_orientation_error: float


@dataclass
class EvalReport:
    rows: list

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if r.status == "ok"]

    @property
    def failures(self) -> int:
        return len(self.rows) - len(self.ok_rows)

    def _stat(self, attr, fn):
        vals = [getattr(r, attr) for r in self.ok_rows]
        return float(fn(vals)) if vals else math.nan

    @property
    def mean_position_error(self):
        return self._stat("position_error", np.mean)

    @property
    def median_position_error(self):
        return self._stat("position_error", np.median)

    @property
    def mean_orientation_error(self):
        return self._stat("orientation_error", np.mean)

    @property
    def median_orientation_error(self):
        return self._stat("orientation_error", np.median)

    def median_position_error_all(self) -> float:
        """Median over every scan, scoring failures by their fallback pose."""
        vals = [
            r.position_error if r.status == "ok" else r.fallback_position_error for r in self.rows
        ]
        return float(np.median(vals))

    def summary(self) -> dict:
        return {
            "scans": len(self.rows),
            "failures": self.failures,
            "mean_position_error_m": self.mean_position_error,
            "median_position_error_m": self.median_position_error,
            "mean_orientation_error_deg": self.mean_orientation_error,
            "median_orientation_error_deg": self.median_orientation_error,
        }


def centroid_pose(corr: CorrespondenceSet) -> Pose:
    return Pose.from_translation(corr.world.mean(axis=0) - corr.local.mean(axis=0))


def evaluate(weights, dataset, ransac_cfg) -> EvalReport:
    if not dataset:
        raise EmptyReportError("no test scans to evaluate")
    rows = []
    for scan_id, sample in sorted(dataset, key=lambda item: item[0]):
        corr = forward(np.asarray(sample.cloud, dtype=np.float64), weights)
        fb = pose_error(centroid_pose(corr), sample.gt_pose)
        try:
            est = ransac_pose(corr, ransac_cfg)
        except NoConsensusError:
            rows.append(
                EvalRow(scan_id, "no_consensus", math.nan, math.nan, 0, None, sample.gt_pose,
                        fb.position_error, fb.orientation_error)
            )
            continue
        err = pose_error(est.pose, sample.gt_pose)
        rows.append(
            EvalRow(scan_id, "ok", err.position_error, err.orientation_error, est.inlier_count,
                    est.pose, sample.gt_pose, fb.position_error, fb.orientation_error)
        )
    return EvalReport(rows)


def _pose_fields(pose: Pose | None):
    if pose is None:
        return [math.nan] * 7
    return [*pose.translation, *pose.quaternion()]


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "status", "pos_err_m", "rot_err_deg", "inliers"])
        for r in report.rows:
            writer.writerow([r.scan_id, r.status, repr(r.position_error), repr(r.orientation_error), r.inliers])
        for key, value in report.summary().items():
            writer.writerow([f"# {key}", repr(value)])


def write_trajectory(path, report: EvalReport) -> None:
    names = ["tx", "ty", "tz", "qw", "qx", "qy", "qz"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["scan_id", *(f"est_{n}" for n in names), *(f"gt_{n}" for n in names), "pos_err_m", "rot_err_deg"]
        )
        for r in report.rows:
            vals = [*_pose_fields(r.est), *_pose_fields(r.gt), r.position_error, r.orientation_error]
            writer.writerow([r.scan_id, *(repr(float(v)) for v in vals)])


def check_compatible(weights, cfg: RunConfig) -> None:
    """The checkpoint architecture must match the run's model settings."""
    want = cfg.model_config()
    have = weights.config
    skip = {"coord_offset", "coord_scale"}
    diff = [k for k in want.to_dict() if k not in skip and getattr(want, k) != getattr(have, k)]
    if diff:
        raise InvalidInputError(f"checkpoint does not match config on: {', '.join(diff)}")


def cmd_eval(cfg: RunConfig, checkpoint=None, dataset=None) -> EvalReport:
    ckpt = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / CHECKPOINT
    weights = load_checkpoint(ckpt)
    check_compatible(weights, cfg)
    data = evaluation_data(cfg) if dataset is None else dataset
    report = evaluate(weights, data, cfg.ransac_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "eval_report.csv", report)
    write_trajectory(out / "trajectory.csv", report)
    return report


# ---------------------------------------------------------------------------
# bench


def closed_form_dots(length: int, k: int, heads: int) -> int:
    """Exact q.k count with windows clamped at both ends of the sequence."""
    if length > 2 * k:
        return heads * (length * (2 * k + 1) - k * (k + 1))
    idx = np.arange(length)
    return heads * int((np.minimum(idx + k, length - 1) - np.maximum(idx - k, 0) + 1).sum())


@dataclass
class BenchRow:
    tokens: int
    dot_products: int
    bound: int
    closed_form: int
    seconds: float


@dataclass
class BenchResult:
    rows: list
    slope: float


def bench_layer(sizes, k=8, heads=2, dim=32, repeats=5, seed=0) -> BenchResult:
    cfg = LoSWAttConfig(dim, heads, k)
    weights = init_weights(desk_config(init_dim=dim, init_heads=heads, init_window=k), seed=seed)
    rng = np.random.default_rng(seed)
    rows = []
    for v in sizes:
        positions = rng.uniform(0.0, 100.0, size=(v, 3))
        feats = torch.as_tensor(rng.normal(size=(v, dim)))
        stats = {}
        with torch.no_grad():
            loswatt_layer(feats, positions, weights, cfg, prefix="init.attn", stats=stats)
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                loswatt_layer(feats, positions, weights, cfg, prefix="init.attn")
                best = min(best, time.perf_counter() - t0)
        bound = (2 * k + 1) * v * heads
        rows.append(BenchRow(v, stats["qk_dots"], bound, closed_form_dots(v, k, heads), best))
        if stats["qk_dots"] > bound:
            raise AssertionError(f"dot count {stats['qk_dots']} exceeds bound {bound} at V={v}")
    slope = float(np.polyfit(np.log([r.tokens for r in rows]), np.log([r.seconds for r in rows]), 1)[0])
    return BenchResult(rows, slope)


def cmd_bench(cfg: RunConfig) -> BenchResult:
    res = bench_layer(cfg.bench_sizes, cfg.bench_window, cfg.bench_heads, cfg.bench_dim, cfg.bench_repeats, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tokens", "dot_products", "bound", "closed_form"])
        for r in res.rows:
            writer.writerow([r.tokens, r.dot_products, r.bound, r.closed_form])
    with open(out / "bench_timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tokens", "seconds"])
        for r in res.rows:
            writer.writerow([r.tokens, repr(r.seconds)])
        writer.writerow(["# loglog_slope", repr(res.slope)])
    return res


# ---------------------------------------------------------------------------
# invariance


def cmd_invariance(cfg: RunConfig, checkpoint=None) -> InvarianceReport:
    """Exact invariance suite plus end-to-end prediction drift."""
    if checkpoint:
        weights = load_checkpoint(checkpoint)
    else:
        weights = init_weights(cfg.model_config(), seed=cfg.seed)
    data = training_data(cfg)
    cloud = np.asarray(data[0][1].cloud, dtype=np.float64)
    report = run_suite(
        cfg.inv_windows, cfg.inv_transforms, cfg.inv_tokens, seed=cfg.seed, weights=weights, cloud=cloud
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "invariance.csv").write_text(report.to_text())
    return report
