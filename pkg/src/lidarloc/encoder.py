"""Coordinate-free feature initialization and sliding-window attention encoder.

The encoder is written functionally: every layer reads its parameters from a
flat ``{name: tensor}`` dictionary held by :class:`ModelWeights`. That keeps
checkpoints, gradients and optimizer state as plain name-aligned maps.

Token geometry enters the network only through per-window (r, theta) pairs
relative to the window center (horizontal distance and elevation angle), so
a layer is unchanged by yaw rotations and altitude shifts whenever the
sequence order is held fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .geometry import as_cloud, voxelize
from .pose_solver import CorrespondenceSet
from .serialization import CurveKind, PoolConfig, SerializedCloud, apply_pool, pool_plan, serialize

ACTIVATIONS = {"gelu": F.gelu, "softplus": F.softplus, "silu": F.silu}


@dataclass(frozen=True)
class LoSWAttConfig:
    dim: int
    heads: int
    window: int
    softmax: bool = True
    bias_dim: int | None = None
    position_bias: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise InvalidInputError("window half-width k must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise InvalidInputError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def head_bias_dim(self) -> int:
        return self.bias_dim or self.head_dim


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and preprocessing settings.

    Defaults are the full-size settings; :func:`desk_config` gives the
    reduced CPU preset. ``raw_feature`` and ``softmax_free_init`` are the
    ablation switches (``"xyz"`` / ``False`` reproduce the two variants).
    """

    constant: float = 1.0
    raw_feature: str = "constant"
    softmax_free_init: bool = True
    position_bias: bool = True
    init_dim: int = 64
    init_heads: int = 2
    init_window: int = 8
    stage_dims: tuple = (128, 256, 512)
    stage_heads: tuple = (4, 8, 16)
    stage_windows: tuple = (8, 8, 16)
    stage_blocks: tuple = (2, 2, 4)
    pool_kernel: int = 2
    head_layers: int = 6
    head_width: int = 1024
    bias_dim: int = 0
    geo_hidden: int = 32
    ffn_ratio: int = 2
    activation: str = "gelu"
    voxel_size: float = 0.3
    curve: str = "hilbert"
    coord_offset: tuple = (0.0, 0.0, 0.0)
    coord_scale: float = 1.0

    def __post_init__(self):
        for name in ("stage_dims", "stage_heads", "stage_windows", "stage_blocks", "coord_offset"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        m = len(self.stage_dims)
        if not (len(self.stage_heads) == len(self.stage_windows) == len(self.stage_blocks) == m):
            raise InvalidInputError("per-stage settings must all have the same length")
        if self.raw_feature not in ("constant", "xyz"):
            raise InvalidInputError(f"unknown raw_feature {self.raw_feature!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.voxel_size <= 0 or self.coord_scale <= 0:
            raise InvalidInputError("voxel_size and coord_scale must be positive")
        if self.pool_kernel < 1 or self.head_layers < 0:
            raise InvalidInputError("pool_kernel >= 1 and head_layers >= 0 required")
        CurveKind(self.curve)
        list(self.attention_configs())  # validates dims/heads/windows

    @property
    def stages(self) -> int:
        return len(self.stage_dims)

    def init_attention(self) -> LoSWAttConfig:
        return LoSWAttConfig(
            self.init_dim,
            self.init_heads,
            self.init_window,
            softmax=not self.softmax_free_init,
            bias_dim=self.bias_dim or None,
            position_bias=self.position_bias,
        )

    def stage_attention(self, s: int) -> LoSWAttConfig:
        return LoSWAttConfig(
            self.stage_dims[s],
            self.stage_heads[s],
            self.stage_windows[s],
            softmax=True,
            bias_dim=self.bias_dim or None,
            position_bias=self.position_bias,
        )

    def attention_configs(self):
        yield self.init_attention()
        for s in range(self.stages):
            yield self.stage_attention(s)

    @property
    def final_dim(self) -> int:
        return self.stage_dims[-1] if self.stages else self.init_dim

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls.from_flat(raw)

    @classmethod
    def coerce(cls, raw: dict) -> dict:
        """Convert string values of known fields to their typed form."""
        kwargs = {}
        defaults = cls()
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise InvalidInputError(f"unknown model config keys: {sorted(unknown)}")
        for name, value in raw.items():
            default = getattr(defaults, name)
            if not isinstance(value, str):
                kwargs[name] = value
            elif isinstance(default, bool):
                kwargs[name] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[name] = int(value)
            elif isinstance(default, float):
                kwargs[name] = float(value)
            elif isinstance(default, tuple):
                conv = float if name == "coord_offset" else int
                kwargs[name] = tuple(conv(x) for x in value.split(",") if x.strip())
            else:
                kwargs[name] = value
        return kwargs

    @classmethod
    def from_flat(cls, raw: dict) -> ModelConfig:
        return cls(**cls.coerce(raw))


def full_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def desk_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        init_dim=16,
        init_heads=2,
        init_window=8,
        stage_dims=(16, 32, 64),
        stage_heads=(2, 2, 4),
        stage_windows=(8, 8, 8),
        stage_blocks=(1, 1, 1),
        head_layers=4,
        head_width=256,
        geo_hidden=16,
    )
    return replace(base, **overrides)


PRESETS = {"desk": desk_config, "full": full_config}


# ---------------------------------------------------------------------------
# weights


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Ordered parameter names and shapes for a config."""
    shapes = {}

    def lin(name, fan_in, fan_out):
        shapes[f"{name}.w"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (fan_out,)

    def attention(prefix, a: LoSWAttConfig):
        hb = a.heads * a.head_bias_dim
        lin(f"{prefix}.q", a.dim, a.dim)
        lin(f"{prefix}.k", a.dim, a.dim)
        lin(f"{prefix}.v", a.dim, a.dim)
        lin(f"{prefix}.phi2", a.dim, hb)
        lin(f"{prefix}.phi3.0", 2, cfg.geo_hidden)
        lin(f"{prefix}.phi3.1", cfg.geo_hidden, hb)

    def block(prefix, a: LoSWAttConfig):
        attention(f"{prefix}.attn", a)
        lin(f"{prefix}.out", a.dim, a.dim)
        lin(f"{prefix}.ffn.0", a.dim, cfg.ffn_ratio * a.dim)
        lin(f"{prefix}.ffn.1", cfg.ffn_ratio * a.dim, a.dim)

    in_dim = 1 if cfg.raw_feature == "constant" else 3
    lin("cipcs.0", in_dim, cfg.init_dim)
    lin("cipcs.1", cfg.init_dim, cfg.init_dim)
    block("init", cfg.init_attention())
    prev = cfg.init_dim
    for s in range(cfg.stages):
        lin(f"stage{s}.proj", prev, cfg.stage_dims[s])
        for b in range(cfg.stage_blocks[s]):
            block(f"stage{s}.block{b}", cfg.stage_attention(s))
        prev = cfg.stage_dims[s]
    for t in range(cfg.head_layers):
        lin(f"head.{t}", prev, cfg.head_width)
        prev = cfg.head_width
    lin(f"head.{cfg.head_layers}", prev, 3)
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def clone(self) -> ModelWeights:
        return ModelWeights(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype) -> ModelWeights:
        return ModelWeights(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    def parameter_count(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def requires_grad_(self, flag=True) -> ModelWeights:
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=torch.float64) -> ModelWeights:
    """Seeded fan-in-scaled uniform init; biases start at zero."""
    gen = torch.Generator().manual_seed(int(seed))
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            tensors[name] = torch.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            u = torch.rand(shape, generator=gen, dtype=torch.float64)
            tensors[name] = ((2.0 * u - 1.0) * bound).to(dtype)
    return ModelWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# layers


def _linear(x, w, name):
    return x @ w[f"{name}.w"] + w[f"{name}.b"]


def _mlp(x, w, prefix, layers, act):
    for i in range(layers):
        x = _linear(x, w, f"{prefix}.{i}")
        if i < layers - 1:
            x = act(x)
    return x


def _weights_map(weights):
    return weights.tensors if isinstance(weights, ModelWeights) else weights


def cipcs_init(token_count: int, weights, config: ModelConfig | None = None):
    """Identical feature phi1(C) for every token; carries no coordinates."""
    if token_count < 1:
        raise InvalidInputError("token_count must be >= 1")
    w = _weights_map(weights)
    cfg = config or weights.config
    act = ACTIVATIONS[cfg.activation]
    c = torch.full((1, 1), float(cfg.constant), dtype=w["cipcs.0.w"].dtype)
    token = _mlp(c, w, "cipcs", 2, act)
    return token.expand(token_count, -1)


def relative_geometry(offsets):
    """(r, theta) for displacement vectors of shape (..., 3)."""
    d = np.asarray(offsets, dtype=np.float64)
    r = np.hypot(d[..., 0], d[..., 1])
    return r, np.arctan2(d[..., 2], r)


def geometric_token(window_positions, center_index: int):
    """(r, theta) of every window member relative to the center.

    r is the horizontal (xy) distance, theta = atan2(dz, r) the elevation
    angle; atan2 keeps theta = +-pi/2 for members straight above/below.
    """
    pts = as_cloud(window_positions, "window_positions")
    if not 0 <= center_index < len(pts):
        raise InvalidInputError("center_index outside window")
    return relative_geometry(pts - pts[center_index])


def window_indices(length: int, k: int):
    """(V, 2k+1) neighbor slots clamped to the sequence, plus validity mask."""
    offsets = np.arange(-k, k + 1)
    idx = np.arange(length)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < length)
    return np.clip(idx, 0, length - 1), valid


QUERY_BLOCK = 1024


def bias_inputs(geo):
    """(r, theta) -> (log1p(r), theta), the input of the positional-bias MLP.

    Window neighbors can sit up to ~100 m apart where the serialization jumps;
    the log keeps those rare distances from dominating the bias logits.
    """
    return torch.stack([torch.log1p(geo[..., 0]), geo[..., 1]], dim=-1)


def window_geometry(positions, k: int):
    """Vectorized geometric tokens for every window: (V, 2k+1, 2) and mask."""
    pos = np.asarray(positions, dtype=np.float64)
    idx, valid = window_indices(len(pos), k)
    geo = np.stack(relative_geometry(pos[idx] - pos[:, None, :]), axis=-1)
    geo[~valid] = 0.0
    return geo, idx, valid


def loswatt_layer(
    features,
    serialized,
    weights,
    cfg: LoSWAttConfig,
    prefix="attn",
    stats=None,
    act=F.gelu,
    geometry=None,
):
    """Sliding-window attention with a yaw/altitude-invariant positional bias.

    ``serialized`` is a :class:`SerializedCloud` or a (V, 3) array of token
    positions in sequence order. Returns the concatenated head outputs (V, D).
    With ``cfg.softmax`` false the raw logits weight V directly.
    ``geometry`` optionally supplies a cached ``window_geometry`` result.
    """
    w = _weights_map(weights)
    positions = serialized.positions if isinstance(serialized, SerializedCloud) else serialized
    n, dim = features.shape
    if dim != cfg.dim:
        raise InvalidInputError(f"feature dim {dim} != layer dim {cfg.dim}")
    if len(positions) != n:
        raise InvalidInputError(f"{n} features but {len(positions)} positions")
    if w[f"{prefix}.q.w"].shape[0] != dim:
        raise InvalidInputError(f"weights {prefix!r} expect dim {w[f'{prefix}.q.w'].shape[0]}")
    h, dh, db = cfg.heads, cfg.head_dim, cfg.head_bias_dim
    geo, idx, valid = geometry or window_geometry(positions, cfg.window)
    dtype = features.dtype
    idx_t = torch.as_tensor(idx)
    valid_t = torch.as_tensor(valid)

    q = _linear(features, w, f"{prefix}.q").view(n, h, dh)
    k = _linear(features, w, f"{prefix}.k").view(n, h, dh)
    v = _linear(features, w, f"{prefix}.v").view(n, h, dh)
    if cfg.position_bias:
        q2 = _linear(features, w, f"{prefix}.phi2").view(n, 1, h, db)
        g = bias_inputs(torch.as_tensor(geo, dtype=dtype))
    # Windows are gathered one block of queries at a time so the (block, W, H, dh)
    # temporaries stay cache-sized; each row's arithmetic is unchanged.
    blocks = []
    for start in range(0, n, QUERY_BLOCK):
        rows = slice(start, min(n, start + QUERY_BLOCK))
        m = rows.stop - rows.start
        kw = k[idx_t[rows]]  # (m, W, H, dh)
        vw = v[idx_t[rows]]
        logits = (q[rows, None] * kw).sum(-1) / math.sqrt(dh)  # (m, W, H)
        if cfg.position_bias:
            k2 = _linear(act(_linear(g[rows], w, f"{prefix}.phi3.0")), w, f"{prefix}.phi3.1")
            logits = logits + (q2[rows] * k2.view(m, -1, h, db)).sum(-1) / math.sqrt(db)
        mask = valid_t[rows, :, None]
        if cfg.softmax:
            attn = torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=1)
        else:
            attn = logits.masked_fill(~mask, 0.0)
        blocks.append((attn[..., None] * vw).sum(1))
    out = torch.cat(blocks).reshape(n, dim)
    if stats is not None:
        stats["qk_dots"] = stats.get("qk_dots", 0) + int(valid.sum()) * h
        stats["layers"] = stats.get("layers", 0) + 1
    return out


def loswatt_block(
    x, serialized, weights, prefix, cfg: LoSWAttConfig, act, stats=None, geometry=None
):
    """Residual attention + residual feed-forward; no normalization layers.

    Normalization would erase the per-token magnitude that the softmax-free
    layer writes into otherwise identical features.
    """
    w = _weights_map(weights)
    a = loswatt_layer(
        x, serialized, w, cfg, prefix=f"{prefix}.attn", stats=stats, act=act, geometry=geometry
    )
    x = x + _linear(a, w, f"{prefix}.out")
    return x + _mlp(x, w, f"{prefix}.ffn", 2, act)


def regress_heads(features, weights, config: ModelConfig | None = None):
    """T hidden layers with the config activation, then a linear map to xyz."""
    w = _weights_map(weights)
    cfg = config or weights.config
    if features.shape[-1] != w["head.0.w"].shape[0]:
        raise InvalidInputError(
            f"head expects width {w['head.0.w'].shape[0]}, got {features.shape[-1]}"
        )
    act = ACTIVATIONS[cfg.activation]
    x = features
    for t in range(cfg.head_layers):
        x = act(_linear(x, w, f"head.{t}"))
    x = _linear(x, w, f"head.{cfg.head_layers}")
    offset = torch.as_tensor(cfg.coord_offset, dtype=x.dtype)
    return x * cfg.coord_scale + offset


@dataclass
class EncoderOutput:
    """Predicted world coordinates and the token positions they belong to."""

    predictions: torch.Tensor
    serialized: SerializedCloud
    stats: dict

    @property
    def local_points(self) -> np.ndarray:
        return self.serialized.positions


@dataclass
class EncoderPlan:
    """Weight-independent preprocessing of one cloud.

    ``sequences[0]`` is the voxel serialization; ``sequences[s + 1]`` the
    sequence entering stage ``s`` after pooling (``pools[s]``). Window
    geometry is cached per (sequence, half-width).
    """

    sequences: list
    pools: list
    geometry: dict

    def window(self, level: int, k: int):
        key = (level, k)
        if key not in self.geometry:
            self.geometry[key] = window_geometry(self.sequences[level].positions, k)
        return self.geometry[key]

    @property
    def final(self) -> SerializedCloud:
        return self.sequences[-1]


def build_plan(cloud, config: ModelConfig) -> EncoderPlan:
    grid = voxelize(cloud, config.voxel_size)
    ser = serialize(grid, CurveKind(config.curve))
    sequences, pools = [ser], []
    for _ in range(config.stages):
        plan = pool_plan(ser, PoolConfig(config.pool_kernel))
        ser = plan.serialized
        pools.append(plan)
        sequences.append(ser)
    return EncoderPlan(sequences, pools, {})


def encode(cloud, weights: ModelWeights, config: ModelConfig | None = None, stats=None, plan=None):
    """Full network: voxelize, serialize, encode, pool, regress.

    Pass a cached ``plan`` from :func:`build_plan` to skip preprocessing.
    """
    cfg = config or weights.config
    w = weights.tensors if isinstance(weights, ModelWeights) else weights
    act = ACTIVATIONS[cfg.activation]
    dtype = w["cipcs.0.w"].dtype
    stats = {} if stats is None else stats
    plan = plan or build_plan(cloud, cfg)
    ser = plan.sequences[0]
    n = len(ser)
    if cfg.raw_feature == "constant":
        x = cipcs_init(n, w, cfg)
    else:
        rel = (ser.positions - ser.positions.mean(axis=0)) / cfg.coord_scale
        x = _mlp(torch.as_tensor(rel, dtype=dtype), w, "cipcs", 2, act)
    a = cfg.init_attention()
    x = loswatt_block(x, ser, w, "init", a, act, stats, plan.window(0, a.window))
    for s in range(cfg.stages):
        if cfg.pool_kernel > 1:
            if "pool_winners" in stats:
                # which group member wins each max; the loss has a kink wherever this flips
                groups = torch.as_tensor(plan.pools[s].groups, dtype=torch.long)
                stats["pool_winners"].append(x.detach()[groups].argmax(dim=1))
            x = apply_pool(x, plan.pools[s])
        ser = plan.sequences[s + 1]
        x = _linear(x, w, f"stage{s}.proj")
        a = cfg.stage_attention(s)
        geo = plan.window(s + 1, a.window)
        for b in range(cfg.stage_blocks[s]):
            x = loswatt_block(x, ser, w, f"stage{s}.block{b}", a, act, stats, geo)
    pred = regress_heads(x, w, cfg)
    return EncoderOutput(pred, ser, stats)


def forward(cloud, weights: ModelWeights, config: ModelConfig | None = None, plan=None):
    """Predicted correspondences (local token position, world coordinate)."""
    with torch.no_grad():
        out = encode(cloud, weights, config, plan=plan)
    return CorrespondenceSet(
        np.array(out.local_points, dtype=np.float64),
        out.predictions.detach().to(torch.float64).numpy().copy(),
    )
