"""On-disk formats: binary scans, pose CSVs and model checkpoints.

Scan file (``.mlsc``)::

    b"MLSC" | version u16 | point count u32 | N x 3 float32, all little endian

Pose file: CSV with header ``scan_id,tx,ty,tz,qw,qx,qy,qz``; the quaternion
is scalar-first and maps sensor frame to world frame.

Checkpoint (``.mlck``)::

    b"MLCK" | version u16 | config length u32 | config text (utf-8)
    | tensor count u32 | per tensor: name length u16, name, dtype u8,
      ndim u8, dims u32 each, raw little-endian data
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
import torch

from .encoder import ModelConfig, ModelWeights, parameter_shapes
from .errors import FileFormatError
from .geometry import Pose

SCAN_MAGIC = b"MLSC"
SCAN_VERSION = 1
_SCAN_HEADER = struct.Struct("<4sHI")

CKPT_MAGIC = b"MLCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}

POSE_HEADER = ["scan_id", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
QUAT_NORM_TOL = 1e-6


def save_scan(path, cloud) -> None:
    pts = np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise FileFormatError(f"scan must be (N, 3), got {pts.shape}")
    data = pts.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise FileFormatError("scan contains non-finite values (after float32 conversion)")
    with open(path, "wb") as fh:
        fh.write(_SCAN_HEADER.pack(SCAN_MAGIC, SCAN_VERSION, len(data)))
        fh.write(data.tobytes())


def load_scan(path) -> np.ndarray:
    """(N, 3) float32 cloud, exactly as stored."""
    raw = Path(path).read_bytes()
    if len(raw) < _SCAN_HEADER.size:
        raise FileFormatError(
            f"{path}: truncated header, expected {_SCAN_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, count = _SCAN_HEADER.unpack_from(raw)
    if magic != SCAN_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {SCAN_MAGIC!r}")
    if version != SCAN_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}, expected {SCAN_VERSION}")
    expected = _SCAN_HEADER.size + 12 * count
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise FileFormatError(f"{path}: {kind} file, expected {expected} bytes, got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", offset=_SCAN_HEADER.size).reshape(count, 3)
    if not np.all(np.isfinite(pts)):
        raise FileFormatError(f"{path}: non-finite coordinates")
    return pts.astype(np.float32)


def save_poses(path, poses: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_HEADER)
        for scan_id, pose in poses.items():
            q = pose.quaternion()
            writer.writerow([scan_id, *(repr(float(x)) for x in (*pose.translation, *q))])


def load_poses(path) -> dict:
    """``{scan_id: Pose}`` in file order."""
    path = Path(path)
    if not path.is_file():
        raise FileFormatError(f"pose file not found: {path}")
    poses = {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (line_no == 1 and row[0].strip() == "scan_id"):
                continue
            if len(row) != 8:
                raise FileFormatError(f"{path}:{line_no}: expected 8 fields, got {len(row)}")
            scan_id = row[0].strip()
            try:
                vals = np.array([float(x) for x in row[1:]])
            except ValueError as exc:
                raise FileFormatError(f"{path}:{line_no}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise FileFormatError(f"{path}:{line_no}: non-finite value")
            norm = np.linalg.norm(vals[3:])
            if abs(norm - 1.0) > QUAT_NORM_TOL:
                raise FileFormatError(f"{path}:{line_no}: quaternion norm {norm:.9f} is not 1")
            if scan_id in poses:
                raise FileFormatError(f"{path}:{line_no}: duplicate scan_id {scan_id!r}")
            poses[scan_id] = Pose.from_quaternion(vals[3:] / norm, vals[:3])
    return poses


def save_checkpoint(path, weights: ModelWeights) -> None:
    cfg = weights.config.to_text().encode()
    parts = [struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(cfg)), cfg]
    parts.append(struct.pack("<I", len(weights.tensors)))
    for name, t in weights.tensors.items():
        t = t.detach()
        if t.dtype not in _DTYPE_CODES:
            raise FileFormatError(f"cannot store dtype {t.dtype} for {name}")
        code = _DTYPE_CODES[t.dtype]
        key = name.encode()
        parts.append(struct.pack("<HBB", len(key), code, t.dim()))
        parts.append(key)
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelWeights:
    path = Path(path)
    if not path.is_file():
        raise FileFormatError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FileFormatError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    magic, version, cfg_len = struct.unpack("<4sHI", take(10))
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FileFormatError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    config = ModelConfig.from_text(take(cfg_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        name_len, code, ndim = struct.unpack("<HBB", take(4))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if code not in _DTYPES:
            raise FileFormatError(f"{path}: unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("=")))
    if pos != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    expected = {k: tuple(v) for k, v in parameter_shapes(config).items()}
    found = {k: tuple(v.shape) for k, v in tensors.items()}
    if expected != found:
        raise FileFormatError(f"{path}: tensors do not match the stored model config")
    return ModelWeights(config, tensors)
