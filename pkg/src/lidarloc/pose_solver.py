"""Robust 6-DoF pose from local -> world point correspondences."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateConfigurationError, InvalidInputError, NoConsensusError
from .geometry import Pose, as_cloud

RANK_TOL = 1e-9


@dataclass(frozen=True)
class CorrespondenceSet:
    local: np.ndarray
    world: np.ndarray

    def __post_init__(self):
        local = as_cloud(self.local, "local")
        world = as_cloud(self.world, "world")
        if local.shape != world.shape:
            raise InvalidInputError(f"local {local.shape} and world {world.shape} differ")
        object.__setattr__(self, "local", local)
        object.__setattr__(self, "world", world)

    def __len__(self):
        return len(self.local)


def load_correspondences(path) -> CorrespondenceSet:
    """Read ``lx,ly,lz,wx,wy,wz`` rows (an optional header row is skipped)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if rows:
                    raise InvalidInputError(f"{path}: non-numeric row {row}")
                continue  # header
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return CorrespondenceSet(arr[:, :3], arr[:, 3:])


def save_correspondences(path, corr: CorrespondenceSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lx", "ly", "lz", "wx", "wy", "wz"])
        for l, w in zip(corr.local, corr.world):
            writer.writerow([repr(float(v)) for v in (*l, *w)])


def _kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Batched least-squares rotation/translation; (B, n, 3) inputs.

    Returns (R, t, ok) where ``ok`` flags non-degenerate problems (cross
    covariance of rank >= 2).
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    h = np.einsum("bni,bnj->bij", src - cs, dst - cd)
    u, s, vt = np.linalg.svd(h)
    scale = np.maximum(s[:, 0], np.finfo(float).tiny)
    ok = s[:, 1] > RANK_TOL * scale
    # also reject point sets that are themselves (near) collinear
    ss = np.linalg.svd(src - cs, compute_uv=False)
    ok &= ss[:, 1] > RANK_TOL * np.maximum(ss[:, 0], np.finfo(float).tiny)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", vt.transpose(0, 2, 1), u.transpose(0, 2, 1))))
    d[d == 0] = 1.0
    diag = np.ones((len(src), 3))
    diag[:, 2] = d
    rot = np.einsum("bji,bj,bkj->bik", vt, diag, u)
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", rot, cs[:, 0, :])
    return rot, t, ok


def kabsch(src, dst) -> Pose:
    """Rigid pose minimizing sum ||R src_i + t - dst_i||^2 (det R = +1)."""
    src = as_cloud(src, "src")
    dst = as_cloud(dst, "dst")
    if src.shape != dst.shape or len(src) < 3:
        raise InvalidInputError("kabsch needs matched point sets of at least 3 points")
    rot, t, ok = _kabsch_batch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateConfigurationError("correspondences are collinear or coincident")
    return Pose(rot[0], t[0])


def sample_consistency(src_triple, dst_triple, ratio: float) -> bool:
    """Accept iff each pairwise edge keeps min/max length ratio >= ``ratio``."""
    return bool(_consistency_batch(np.asarray(src_triple)[None], np.asarray(dst_triple)[None], ratio)[0])


def _consistency_batch(src, dst, ratio):
    n = src.shape[1]
    i, j = np.triu_indices(n, k=1)
    ds = np.linalg.norm(src[:, i] - src[:, j], axis=-1)
    dd = np.linalg.norm(dst[:, i] - dst[:, j], axis=-1)
    hi = np.maximum(ds, dd)
    lo = np.minimum(ds, dd)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(hi > 0, lo / hi, 0.0)
    return np.all(r >= ratio, axis=1)


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 0.6
    max_iterations: int = 100_000
    confidence: float = 0.999
    edge_length_ratio: float = 0.9
    sample_size: int = 3
    seed: int = 0
    chunk: int = 512

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise InvalidInputError("inlier_threshold must be positive")
        if not 0 < self.confidence < 1:
            raise InvalidInputError("confidence must lie in (0, 1)")
        if not 0 < self.edge_length_ratio <= 1:
            raise InvalidInputError("edge_length_ratio must lie in (0, 1]")
        if self.sample_size < 3 or self.max_iterations < 1:
            raise InvalidInputError("sample_size >= 3 and max_iterations >= 1 required")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inlier_mask: np.ndarray
    inlier_count: int
    iterations: int
    sample_pose: Pose | None = None


def required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    """Iterations T with 1 - (1 - w^s)^T >= confidence."""
    p_good = inlier_ratio**sample_size
    if p_good <= 0:
        return math.inf
    if p_good >= 1:
        return 1
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def residuals(pose: Pose, corr: CorrespondenceSet) -> np.ndarray:
    return np.linalg.norm(corr.local @ pose.rotation.T + pose.translation - corr.world, axis=1)


def ransac_pose(corr: CorrespondenceSet, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Seeded RANSAC over minimal samples with edge-ratio filtering.

    Hypotheses are drawn and scored in vectorized chunks, then visited in
    iteration order so the best model and the stopping point match a plain
    sequential loop.
    """
    m = len(corr)
    s = cfg.sample_size
    if m < s:
        raise InvalidInputError(f"need at least {s} correspondences, got {m}")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold
    best_count, best_iter, best_pose = 0, -1, None
    needed = float(cfg.max_iterations)
    it = 0
    while it < min(needed, cfg.max_iterations):
        b = min(cfg.chunk, cfg.max_iterations - it)
        samples = np.stack([rng.choice(m, size=s, replace=False) for _ in range(b)])
        src = corr.local[samples]
        dst = corr.world[samples]
        good = _consistency_batch(src, dst, cfg.edge_length_ratio)
        counts = np.zeros(b, dtype=np.int64)
        rot = np.zeros((b, 3, 3))
        trans = np.zeros((b, 3))
        if good.any():
            r, t, ok = _kabsch_batch(src[good], dst[good])
            gi = np.flatnonzero(good)
            rot[gi], trans[gi] = r, t
            good[gi[~ok]] = False
            gi = np.flatnonzero(good)
            if len(gi):
                pred = np.einsum("bij,mj->bmi", rot[gi], corr.local) + trans[gi, None, :]
                err = np.linalg.norm(pred - corr.world[None], axis=-1)
                counts[gi] = (err <= thr).sum(axis=1)
        for j in range(b):
            if it >= needed:
                break
            if counts[j] > best_count:
                best_count, best_iter = int(counts[j]), it
                best_pose = (rot[j].copy(), trans[j].copy())
                needed = required_iterations(best_count / m, s, cfg.confidence)
            it += 1
    if best_pose is None or best_count < s:
        raise NoConsensusError(f"no hypothesis reached {s} inliers in {it} iterations")
    pose = sample_pose = Pose(*best_pose)
    mask = residuals(pose, corr) <= thr
    try:
        refit = kabsch(corr.local[mask], corr.world[mask])
        refit_mask = residuals(refit, corr) <= thr
        if refit_mask.sum() >= s:
            pose, mask = refit, refit_mask
    except DegenerateConfigurationError:
        pass
    return PoseEstimate(pose, mask, int(mask.sum()), it, sample_pose)
