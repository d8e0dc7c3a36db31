"""Numerical checks of the encoder's yaw/altitude invariance.

Exact checks (pass/fail):

* geometric tokens of a window are unchanged by a yaw rotation plus an
  altitude shift;
* one attention layer is unchanged when the token order is held fixed;
* constant inputs collapse under softmax but not without it.

The end-to-end drift measurement is informational: re-voxelizing and
re-serializing a transformed scan changes the windows, so predictions move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .encoder import (
    LoSWAttConfig,
    ModelWeights,
    cipcs_init,
    desk_config,
    forward,
    init_weights,
    loswatt_layer,
    relative_geometry,
)
from .geometry import apply_pose, voxelize, yaw_rotation
from .serialization import serialize

TOKEN_TOL = 1e-9
LAYER_TOL = 1e-6
COLLAPSE_TOL = 1e-12
SPREAD_MIN = 1e-8


def _random_transforms(rng, count, dz_range=10.0):
    yaws = rng.uniform(0.0, 2.0 * math.pi, count)
    shifts = rng.uniform(-dz_range, dz_range, count)
    return [yaw_rotation(a, dz) for a, dz in zip(yaws, shifts)]


def token_deviation(windows=1000, transforms=100, k=8, seed=0):
    """Max |dr| and |dtheta| over random windows and transforms."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-20.0, 20.0, size=(windows, 2 * k + 1, 3))
    centers = rng.integers(0, 2 * k + 1, size=windows)
    rows = np.arange(windows)
    r0, t0 = relative_geometry(pts - pts[rows, centers][:, None])
    max_r = max_t = 0.0
    for pose in _random_transforms(rng, transforms):
        moved = pts @ pose.rotation.T + pose.translation
        r1, t1 = relative_geometry(moved - moved[rows, centers][:, None])
        max_r = max(max_r, float(np.abs(r1 - r0).max()))
        max_t = max(max_t, float(np.abs(t1 - t0).max()))
    return max_r, max_t


def _layer_setup(tokens, seed, dim=16, heads=2, k=8):
    rng = np.random.default_rng(seed)
    cloud = rng.uniform([-30, -30, 0], [30, 30, 15], size=(tokens * 3, 3))
    ser = serialize(voxelize(cloud, 1.0))
    positions = ser.positions[:tokens]
    cfg = desk_config(init_dim=dim, init_heads=heads, init_window=k)
    weights = init_weights(cfg, seed=seed, dtype=torch.float64)
    feats = torch.as_tensor(rng.normal(size=(len(positions), dim)))
    return rng, positions, feats, weights


def layer_deviation(tokens=512, transforms=100, seed=0, softmax=True):
    """Max output change of one layer when only the positions are transformed."""
    rng, positions, feats, weights = _layer_setup(tokens, seed)
    cfg = LoSWAttConfig(feats.shape[1], 2, 8, softmax=softmax)
    base = loswatt_layer(feats, positions, weights, cfg, prefix="init.attn")
    worst = 0.0
    for pose in _random_transforms(rng, transforms):
        out = loswatt_layer(feats, apply_pose(pose, positions), weights, cfg, prefix="init.attn")
        worst = max(worst, float((out - base).abs().max()))
    return worst


def collapse_spread(tokens=64, seed=0):
    """Across-token output variance for constant inputs: (softmax, softmax-free)."""
    _, positions, _, weights = _layer_setup(tokens, seed)
    cfg = weights.config
    feats = cipcs_init(len(positions), weights, cfg)
    spreads = []
    for softmax in (True, False):
        a = LoSWAttConfig(cfg.init_dim, cfg.init_heads, cfg.init_window, softmax=softmax)
        out = loswatt_layer(feats, positions, weights, a, prefix="init.attn")
        spreads.append(float(out.var(dim=0, unbiased=False).max()))
    return tuple(spreads)


def prediction_drift(weights: ModelWeights, cloud, transforms=100, seed=0):
    """Median and max displacement of predictions after re-serialization.

    Each token of the transformed scan is matched to the nearest token of
    the original scan (positions mapped back to the original frame).
    """
    rng = np.random.default_rng(seed)
    cloud = np.asarray(cloud, dtype=np.float64)
    base = forward(cloud, weights)
    tree = cKDTree(base.local)
    medians, maxima = [], []
    for pose in _random_transforms(rng, transforms, dz_range=2.0):
        moved = forward(apply_pose(pose, cloud), weights)
        back = (moved.local - pose.translation) @ pose.rotation
        _, nn = tree.query(back)
        drift = np.linalg.norm(moved.world - base.world[nn], axis=1)
        medians.append(float(np.median(drift)))
        maxima.append(float(drift.max()))
    return float(np.median(medians)), float(max(maxima))


@dataclass
class Check:
    name: str
    value: float
    bound: float
    passed: bool


@dataclass
class InvarianceReport:
    checks: list = field(default_factory=list)
    drift_median: float = math.nan
    drift_max: float = math.nan

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = ["check,value,bound,status"]
        for c in self.checks:
            lines.append(f"{c.name},{c.value!r},{c.bound!r},{'pass' if c.passed else 'FAIL'}")
        lines.append(f"drift_median_m,{self.drift_median!r},,info")
        lines.append(f"drift_max_m,{self.drift_max!r},,info")
        return "\n".join(lines) + "\n"


def run_suite(windows=1000, transforms=100, tokens=512, seed=0, weights=None, cloud=None):
    report = InvarianceReport()
    dr, dt = token_deviation(windows, transforms, seed=seed)
    report.checks.append(Check("token_r", dr, TOKEN_TOL, dr <= TOKEN_TOL))
    report.checks.append(Check("token_theta", dt, TOKEN_TOL, dt <= TOKEN_TOL))
    for softmax in (True, False):
        dev = layer_deviation(tokens, transforms, seed=seed, softmax=softmax)
        name = "layer_softmax" if softmax else "layer_softmax_free"
        report.checks.append(Check(name, dev, LAYER_TOL, dev <= LAYER_TOL))
    with_sm, without_sm = collapse_spread(seed=seed)
    report.checks.append(Check("collapse_softmax", with_sm, COLLAPSE_TOL, with_sm <= COLLAPSE_TOL))
    report.checks.append(Check("spread_softmax_free", without_sm, SPREAD_MIN, without_sm > SPREAD_MIN))
    if weights is not None and cloud is not None:
        report.drift_median, report.drift_max = prediction_drift(weights, cloud, transforms, seed)
    return report
