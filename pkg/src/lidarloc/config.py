"""Run configuration: a flat, versioned ``key=value`` text file.

Keys prefixed with ``model.`` override fields of the chosen model preset.
Snapshots written by the commands list every resolved value, so feeding a
snapshot back in reruns the exact same computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder import PRESETS, ModelConfig
from .errors import InvalidInputError
from .pose_solver import RansacConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/default"
    # training budget
    epochs: int = 600
    batch_size: int = 1
    lr: float = 0.002
    # robust pose solver
    ransac_threshold: float = 0.6
    ransac_max_iterations: int = 100_000
    ransac_confidence: float = 0.999
    ransac_edge_ratio: float = 0.9
    # data from disk: <dir>/poses.csv plus <dir>/<scan_id>.mlsc
    data_dir: str = ""
    test_dir: str = ""
    # synthetic data (used when synth_scans > 0)
    synth_scans: int = 0
    scene_seed: int = 3
    scene_extent: float = 100.0
    scene_buildings: int = 20
    trajectory_seed: int = 1
    altitude: float = 12.0
    yaw_mode: str = "heading"
    sensor_channels: int = 32
    sensor_azimuth: int = 128
    sensor_max_range: float = 60.0
    range_noise: float = 0.0
    # synthetic test set: same trajectory positions, optionally re-posed
    test_yaw: str = "same"
    test_altitude_offset: float = 0.0
    test_seed: int = 100
    # bench
    bench_sizes: tuple = (1000, 2000, 4000, 8000, 16000)
    bench_window: int = 8
    bench_heads: int = 2
    bench_dim: int = 32
    bench_repeats: int = 5
    # invariance suite
    inv_windows: int = 1000
    inv_transforms: int = 100
    inv_tokens: int = 512
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bench_sizes", tuple(int(v) for v in self.bench_sizes))
        object.__setattr__(self, "model", dict(self.model))
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidInputError(
                f"config schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})"
            )
        if self.preset not in PRESETS:
            raise InvalidInputError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if bool(self.data_dir) == (self.synth_scans > 0):
            raise InvalidInputError("set exactly one data source: data_dir or synth_scans > 0")
        if self.yaw_mode not in ("heading", "random"):
            raise InvalidInputError(f"yaw_mode must be heading or random, got {self.yaw_mode!r}")
        if self.test_yaw not in ("same", "random"):
            raise InvalidInputError(f"test_yaw must be same or random, got {self.test_yaw!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs >= 0 and batch_size >= 1 required")
        if self.bench_window < 1:
            raise InvalidInputError("bench_window k must be >= 1")
        self.model_config()
        self.ransac_config()

    @property
    def synthetic(self) -> bool:
        return self.synth_scans > 0

    def model_config(self, **extra) -> ModelConfig:
        return PRESETS[self.preset](**ModelConfig.coerce({**self.model, **extra}))

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(
            inlier_threshold=self.ransac_threshold,
            max_iterations=self.ransac_max_iterations,
            confidence=self.ransac_confidence,
            edge_length_ratio=self.ransac_edge_ratio,
            seed=self.seed,
        )

    def with_overrides(self, **kw) -> RunConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "model":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        for line in self.model_config().to_text().splitlines():
            lines.append(f"model.{line}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        raw = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidInputError(f"config line {n}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls.from_flat(raw)

    @classmethod
    def from_flat(cls, raw: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        defaults = cls.__dataclass_fields__
        kwargs, model = {}, {}
        for key, value in raw.items():
            if key.startswith("model."):
                model[key[len("model."):]] = value
                continue
            if key not in known or key == "model":
                raise InvalidInputError(f"unknown config key {key!r}")
            default = defaults[key].default
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(value).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                elif isinstance(default, tuple):
                    kwargs[key] = tuple(int(x) for x in str(value).split(",") if x.strip())
                else:
                    kwargs[key] = str(value)
            except ValueError:
                raise InvalidInputError(f"config key {key!r}: bad value {value!r}") from None
        return cls(**kwargs, model=model)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    return RunConfig.from_text(path.read_text())


def default_synthetic_config(**kw) -> RunConfig:
    """Desk-scale synthetic setup: one 20-scan trajectory."""
    return RunConfig(synth_scans=20, **kw)

