"""Space-filling-curve ordering of voxels and sequence pooling.

Both curves work on non-negative integer cells with ``bits`` bits per axis.
The Hilbert curve uses the transposed-bits Gray-code construction
(J. Skilling, "Programming the Hilbert curve", 2004), vectorized over numpy
arrays so a whole scan is encoded in ``bits`` passes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError
from .geometry import VoxelGrid

MAX_BITS = 21


class CurveKind(str, enum.Enum):
    MORTON = "morton"
    HILBERT = "hilbert"


def _check_domain(cells: np.ndarray, bits: int) -> None:
    if bits < 1 or 3 * bits > 63:
        raise InvalidInputError(f"bits must satisfy 1 <= bits and 3*bits <= 63, got {bits}")
    if cells.size and (cells.min() < 0 or cells.max() >= (1 << bits)):
        raise InvalidInputError(f"cell index outside [0, 2^{bits})")


def _stack(ix, iy, iz):
    cells = np.stack(np.broadcast_arrays(np.asarray(ix), np.asarray(iy), np.asarray(iz)), axis=-1)
    return cells.astype(np.int64)


def _scalar_or_array(codes: np.ndarray, ix):
    if np.ndim(ix) == 0:
        return int(codes.reshape(()))
    return codes


def morton_cells(cells: np.ndarray, bits: int = MAX_BITS) -> np.ndarray:
    """Morton (Z-order) codes of an (..., 3) integer array."""
    cells = np.asarray(cells, dtype=np.int64)
    _check_domain(cells, bits)
    c = cells.astype(np.uint64)
    code = np.zeros(cells.shape[:-1], dtype=np.uint64)
    for j in range(bits):
        for axis in range(3):
            bit = (c[..., axis] >> np.uint64(j)) & np.uint64(1)
            code |= bit << np.uint64(3 * j + axis)
    return code


def morton_encode(ix, iy, iz, bits: int = MAX_BITS):
    """Interleave bits as x0 y0 z0 x1 y1 z1 ... from the least significant end."""
    return _scalar_or_array(morton_cells(_stack(ix, iy, iz), bits), ix)


def _axes_to_transpose(x: np.ndarray, bits: int) -> np.ndarray:
    x = x.copy()
    n = 3
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (x[..., i] & q) != 0
            # invert low bits of x0 where bit set, else exchange low bits of x0 and xi
            t = (x[..., 0] ^ x[..., i]) & p
            x0_new = np.where(hit, x[..., 0] ^ p, x[..., 0] ^ t)
            if i != 0:
                x[..., i] = np.where(hit, x[..., i], x[..., i] ^ t)
            x[..., 0] = x0_new
        q >>= 1
    for i in range(1, n):
        x[..., i] ^= x[..., i - 1]
    t = np.zeros(x.shape[:-1], dtype=x.dtype)
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[..., n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    x ^= t[..., None]
    return x


def _transpose_to_axes(x: np.ndarray, bits: int) -> np.ndarray:
    x = x.copy()
    n = 3
    big = 2 << (bits - 1)
    t = x[..., n - 1] >> 1
    for i in range(n - 1, 0, -1):
        x[..., i] ^= x[..., i - 1]
    x[..., 0] ^= t
    q = 2
    while q != big:
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (x[..., i] & q) != 0
            t = (x[..., 0] ^ x[..., i]) & p
            x0_new = np.where(hit, x[..., 0] ^ p, x[..., 0] ^ t)
            if i != 0:
                x[..., i] = np.where(hit, x[..., i], x[..., i] ^ t)
            x[..., 0] = x0_new
        q <<= 1
    return x


def hilbert_cells(cells: np.ndarray, bits: int = MAX_BITS) -> np.ndarray:
    """Hilbert codes of an (..., 3) integer array."""
    cells = np.asarray(cells, dtype=np.int64)
    _check_domain(cells, bits)
    tr = _axes_to_transpose(cells, bits)
    code = np.zeros(cells.shape[:-1], dtype=np.uint64)
    for j in range(bits):
        for i in range(3):
            bit = ((tr[..., i] >> j) & 1).astype(np.uint64)
            code |= bit << np.uint64(3 * j + (2 - i))
    return code


def hilbert_decode_cells(codes, bits: int = MAX_BITS) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    tr = np.zeros(codes.shape + (3,), dtype=np.int64)
    for j in range(bits):
        for i in range(3):
            bit = ((codes >> np.uint64(3 * j + (2 - i))) & np.uint64(1)).astype(np.int64)
            tr[..., i] |= bit << j
    return _transpose_to_axes(tr, bits)


def hilbert_encode(ix, iy, iz, bits: int = MAX_BITS):
    return _scalar_or_array(hilbert_cells(_stack(ix, iy, iz), bits), ix)


def hilbert_decode(code, bits: int = MAX_BITS):
    cells = hilbert_decode_cells(code, bits)
    if np.ndim(code) == 0:
        return tuple(int(v) for v in cells)
    return cells


def curve_codes(cells: np.ndarray, curve: CurveKind, bits: int = MAX_BITS) -> np.ndarray:
    curve = CurveKind(curve)
    if curve is CurveKind.MORTON:
        return morton_cells(cells, bits)
    return hilbert_cells(cells, bits)


@dataclass(frozen=True)
class SerializedCloud:
    """Tokens in curve order.

    ``order[s]`` is the pre-sort index of the token at sequence slot ``s``;
    ``codes`` and ``positions`` are already arranged in sequence order.
    """

    order: np.ndarray
    codes: np.ndarray
    positions: np.ndarray
    voxel_size: float
    origin: np.ndarray
    curve: CurveKind
    source_grid: VoxelGrid | None = None

    def __len__(self):
        return len(self.order)


def _order_positions(positions, voxel_size, origin, curve):
    cells = np.floor((positions - origin) / voxel_size).astype(np.int64)
    if cells.size and cells.max() >= (1 << MAX_BITS):
        raise InvalidInputError(f"scene exceeds the {MAX_BITS}-bit per-axis budget")
    codes = curve_codes(np.maximum(cells, 0), curve)
    order = np.argsort(codes, kind="stable")
    return order, codes[order]


def serialize(grid: VoxelGrid, curve: CurveKind = CurveKind.HILBERT) -> SerializedCloud:
    if len(grid) == 0:
        raise InvalidInputError("cannot serialize an empty grid")
    cells = np.asarray(grid.indices, dtype=np.int64)
    if cells.min() < 0 or cells.max() >= (1 << MAX_BITS):
        raise InvalidInputError(f"voxel index overflows {MAX_BITS} bits per axis")
    codes = curve_codes(cells, curve)
    order = np.argsort(codes, kind="stable")
    return SerializedCloud(
        order=order,
        codes=codes[order],
        positions=grid.positions[order],
        voxel_size=grid.voxel_size,
        origin=np.asarray(grid.origin),
        curve=CurveKind(curve),
        source_grid=grid,
    )


@dataclass(frozen=True)
class PoolConfig:
    kernel: int = 2

    def __post_init__(self):
        if int(self.kernel) < 1:
            raise InvalidInputError("pool kernel must be >= 1")


@dataclass(frozen=True)
class PoolPlan:
    """Index bookkeeping for one pooling step.

    ``groups`` is (G, kernel): sequence slots merged into each pooled token,
    the short trailing group padded by repeating its last slot. ``order`` maps
    the new sequence slots to pooled-group ids.
    """

    groups: np.ndarray
    order: np.ndarray
    serialized: SerializedCloud


def pool_plan(serialized: SerializedCloud, cfg: PoolConfig) -> PoolPlan:
    k = int(cfg.kernel)
    n = len(serialized)
    if k == 1:
        return PoolPlan(np.arange(n)[:, None], np.arange(n), serialized)
    g = math.ceil(n / k)
    slots = np.arange(g * k).reshape(g, k)
    groups = np.minimum(slots, n - 1)
    counts = np.minimum(k, n - np.arange(g) * k)
    summed = np.add.reduceat(serialized.positions, np.arange(0, n, k), axis=0)
    centroids = summed / counts[:, None]
    voxel_size = serialized.voxel_size * k
    order, codes = _order_positions(centroids, voxel_size, serialized.origin, serialized.curve)
    out = replace(
        serialized,
        order=order,
        codes=codes,
        positions=centroids[order],
        voxel_size=voxel_size,
    )
    return PoolPlan(groups[order], order, out)


def pool_sequence(features, serialized: SerializedCloud, cfg: PoolConfig = PoolConfig()):
    """Max-pool ``kernel`` consecutive tokens; returns (features, serialized).

    ``features`` may be a numpy array or a torch tensor; the result has the
    same type (gradients flow through torch max).
    """
    if len(features) != len(serialized):
        raise InvalidInputError(
            f"feature count {len(features)} != sequence length {len(serialized)}"
        )
    plan = pool_plan(serialized, cfg)
    if cfg.kernel == 1:
        return features, serialized
    pooled = apply_pool(features, plan)
    return pooled, plan.serialized


def apply_pool(features, plan: PoolPlan):
    if isinstance(features, np.ndarray):
        return features[plan.groups].max(axis=1)
    import torch

    idx = torch.as_tensor(plan.groups, dtype=torch.long)
    return features[idx].amax(dim=1)
