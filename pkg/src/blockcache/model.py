"""Stacked-block transformer denoiser with tap points and a resume entry.

The model predicts the noise component of a latent token grid. Blocks are
shape-preserving (tokens x width) and run strictly in sequence, which is
what makes skip-and-resume execution legal: the output of block ``i`` can
be fed straight into block ``i+1`` without touching blocks ``1..i``.

MAC accounting counts matrix-product multiplies only (projections,
attention scores, attention-value products, MLPs); normalization,
softmax, biases, and elementwise modulation are excluded. The closed-form
counts here match the instrumented counter exactly under that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import gelu, layernorm, softmax_rows
from .rng import RngStream
from .tensor_io import read_bundle, write_bundle


@dataclass(frozen=True)
class DitConfig:
    """Architecture profile for the denoiser."""

    depth: int = 8
    width: int = 64
    tokens: int = 16
    heads: int = 4
    cond_dim: int = 64
    in_channels: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.tokens < 1:
            raise ConfigError(f"tokens must be >= 1, got {self.tokens}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.cond_dim < 2 or self.cond_dim % 2 != 0:
            raise ConfigError(f"cond_dim must be a positive even number, got {self.cond_dim}")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "tokens": self.tokens,
            "heads": self.heads,
            "cond_dim": self.cond_dim,
            "in_channels": self.in_channels,
            "seed": self.seed,
        }


TOY_PROFILE = DitConfig(depth=8, width=64, tokens=16, heads=4, cond_dim=64, in_channels=4)
#: Same block dimensions but 28 blocks deep, for configuration-level MAC ratios.
DEEP_PROFILE = replace(TOY_PROFILE, depth=28)
PROFILES = {"toy": TOY_PROFILE, "deep": DEEP_PROFILE}


@dataclass(frozen=True)
class Conditioning:
    """Per-step conditioning: timestep embedding plus a context embedding."""

    timestep_embedding: np.ndarray
    context_embedding: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return self.timestep_embedding + self.context_embedding


@dataclass
class BlockFeature:
    """Residual-stream output of one block at one denoising timestep."""

    block_index: int  # 1-based
    step: int  # train timestep the feature was computed at
    values: np.ndarray  # tokens x width


@dataclass
class OpCounter:
    """Per-call execution counter: blocks entered and multiply-accumulates."""

    blocks: int = 0
    macs: int = 0

    def add_matmul(self, m: int, k: int, n: int) -> None:
        self.macs += m * k * n


def timestep_embedding(t: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep (first half sin, second cos)."""
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half, dtype=np.float64) / half)
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def make_conditioning(cfg: DitConfig, t: int, context: np.ndarray) -> Conditioning:
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (cfg.cond_dim,):
        raise DimensionError(f"context embedding must have shape ({cfg.cond_dim},), got {context.shape}")
    return Conditioning(timestep_embedding(t, cfg.cond_dim), context)


@dataclass
class Model:
    """Immutable weights plus the config that produced them."""

    cfg: DitConfig
    weights: dict[str, np.ndarray] = field(repr=False)

    @property
    def depth(self) -> int:
        return self.cfg.depth


def _block_param_shapes(cfg: DitConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, c = cfg.width, cfg.cond_dim
    return [
        ("adaln.w", (c, 6 * d)),
        ("adaln.b", (6 * d,)),
        ("attn.wq", (d, d)),
        ("attn.bq", (d,)),
        ("attn.wk", (d, d)),
        ("attn.bk", (d,)),
        ("attn.wv", (d, d)),
        ("attn.bv", (d,)),
        ("attn.wo", (d, d)),
        ("attn.bo", (d,)),
        ("mlp.w1", (d, 4 * d)),
        ("mlp.b1", (4 * d,)),
        ("mlp.w2", (4 * d, d)),
        ("mlp.b2", (d,)),
    ]


def param_shapes(cfg: DitConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every weight tensor name and shape, in initialization order."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.w", (cfg.in_channels, cfg.width)),
        ("embed.b", (cfg.width,)),
        ("embed.pos", (cfg.tokens, cfg.width)),
    ]
    for b in range(1, cfg.depth + 1):
        shapes.extend((f"block{b}.{name}", shape) for name, shape in _block_param_shapes(cfg))
    shapes.extend(
        [
            ("head.ln_gain", (cfg.width,)),
            ("head.ln_bias", (cfg.width,)),
            ("head.w", (cfg.width, cfg.in_channels)),
            ("head.b", (cfg.in_channels,)),
        ]
    )
    return shapes


def init_model(cfg: DitConfig) -> Model:
    """Seeded weight init; the same config always yields the same weights.

    Matrices are scaled by 1/sqrt(fan_in), positional embeddings by 0.02,
    layernorm gain is 1, and biases start at zero.
    """
    rng = RngStream(cfg.seed, stream_id=0)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", "ln_bias")):
            weights[name] = np.zeros(shape)
        elif name.endswith("ln_gain"):
            weights[name] = np.ones(shape)
        elif name.endswith("pos"):
            weights[name] = 0.02 * rng.normals(shape)
        else:
            weights[name] = rng.normals(shape) / math.sqrt(shape[0])
    return Model(cfg=cfg, weights=weights)


def _mm(a: np.ndarray, b: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    if counter is not None:
        counter.add_matmul(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def run_single_block(
    model: Model,
    x: np.ndarray,
    cond: Conditioning,
    block_index: int,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """One pre-norm attention + MLP block with adaptive normalization.

    Takes and returns the residual stream (tokens x width); the input is
    not modified.
    """
    cfg = model.cfg
    if not 1 <= block_index <= cfg.depth:
        raise IndexError(f"block index {block_index} outside [1, {cfg.depth}]")
    w = model.weights
    p = f"block{block_index}."
    d, h = cfg.width, cfg.heads
    dh = d // h

    cond_vec = cond.vector
    mods = _mm(cond_vec[None, :], w[p + "adaln.w"], counter)[0] + w[p + "adaln.b"]
    shift1, scale1, gate1, shift2, scale2, gate2 = np.split(mods, 6)

    a = layernorm(x) * (1.0 + scale1) + shift1
    q = _mm(a, w[p + "attn.wq"], counter) + w[p + "attn.bq"]
    k = _mm(a, w[p + "attn.wk"], counter) + w[p + "attn.bk"]
    v = _mm(a, w[p + "attn.wv"], counter) + w[p + "attn.bv"]
    out = np.empty_like(a)
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        scores = _mm(q[:, sl], k[:, sl].T, counter) / math.sqrt(dh)
        out[:, sl] = _mm(softmax_rows(scores), v[:, sl], counter)
    x = x + gate1 * (_mm(out, w[p + "attn.wo"], counter) + w[p + "attn.bo"])

    a = layernorm(x) * (1.0 + scale2) + shift2
    hidden = gelu(_mm(a, w[p + "mlp.w1"], counter) + w[p + "mlp.b1"])
    x = x + gate2 * (_mm(hidden, w[p + "mlp.w2"], counter) + w[p + "mlp.b2"])

    if counter is not None:
        counter.blocks += 1
    return x


def _embed(model: Model, z_t: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    cfg = model.cfg
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != (cfg.tokens, cfg.in_channels):
        raise DimensionError(
            f"latent must have shape ({cfg.tokens}, {cfg.in_channels}), got {z_t.shape}"
        )
    w = model.weights
    return _mm(z_t, w["embed.w"], counter) + w["embed.b"] + w["embed.pos"]


def _output_head(model: Model, x: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    w = model.weights
    y = layernorm(x, w["head.ln_gain"], w["head.ln_bias"])
    return _mm(y, w["head.w"], counter) + w["head.b"]


def forward_full(
    model: Model,
    z_t: np.ndarray,
    cond: Conditioning,
    t: int,
    taps=(),
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, list[BlockFeature]]:
    """Run all blocks; returns the noise prediction and requested tap copies.

    Tap indices are 1-based block numbers; tapping copies the residual
    stream after the block and never changes the prediction.
    """
    taps = frozenset(int(i) for i in taps)
    for i in taps:
        if not 1 <= i <= model.cfg.depth:
            raise IndexError(f"tap index {i} outside [1, {model.cfg.depth}]")
    x = _embed(model, z_t, counter)
    tapped: list[BlockFeature] = []
    for b in range(1, model.cfg.depth + 1):
        x = run_single_block(model, x, cond, b, counter)
        if b in taps:
            tapped.append(BlockFeature(block_index=b, step=int(t), values=x.copy()))
    eps = _output_head(model, x, counter)
    return eps, tapped


def forward_from_block(
    model: Model,
    cached: BlockFeature,
    cond: Conditioning,
    t: int,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Resume after block ``cached.block_index`` on cached features.

    Only blocks ``cached.block_index + 1 .. depth`` and the output head
    run; the embedding and earlier blocks are never evaluated. The cached
    values are read under the conditioning for the CURRENT timestep ``t``.
    """
    i = cached.block_index
    if not 1 <= i <= model.cfg.depth - 1:
        raise IndexError(f"resume block index {i} outside [1, {model.cfg.depth - 1}]")
    x = np.asarray(cached.values, dtype=np.float64)
    if x.shape != (model.cfg.tokens, model.cfg.width):
        raise DimensionError(
            f"cached features must have shape ({model.cfg.tokens}, {model.cfg.width}), got {x.shape}"
        )
    for b in range(i + 1, model.cfg.depth + 1):
        x = run_single_block(model, x, cond, b, counter)
    return _output_head(model, x, counter)


def per_block_macs(cfg: DitConfig) -> int:
    """Matrix-product multiplies in one block."""
    d, c, t = cfg.width, cfg.cond_dim, cfg.tokens
    adaln = c * 6 * d
    qkv_and_proj = 4 * t * d * d
    attention = 2 * t * t * d
    mlp = 8 * t * d * d
    return adaln + qkv_and_proj + attention + mlp


def embed_macs(cfg: DitConfig) -> int:
    return cfg.tokens * cfg.in_channels * cfg.width


def head_macs(cfg: DitConfig) -> int:
    return cfg.tokens * cfg.width * cfg.in_channels


def mac_count(cfg: DitConfig, blocks_executed: int) -> int:
    """Closed-form MACs for a pass executing the given number of blocks,
    including the fixed embedding and head cost."""
    if not 0 <= blocks_executed <= cfg.depth:
        raise ValueError(f"blocks_executed {blocks_executed} outside [0, {cfg.depth}]")
    return embed_macs(cfg) + head_macs(cfg) + blocks_executed * per_block_macs(cfg)


def save_model(path, model: Model) -> None:
    write_bundle(path, model.weights, meta={"kind": "denoiser", "config": model.cfg.to_dict()})


def load_model(path) -> Model:
    tensors, meta = read_bundle(path)
    cfg = DitConfig(**meta["config"])
    expected = [name for name, _ in param_shapes(cfg)]
    if list(tensors) != expected:
        raise ConfigError(f"checkpoint tensors do not match config {cfg}")
    return Model(cfg=cfg, weights=tensors)
