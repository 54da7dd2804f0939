"""Adapted Vision Transformer over the concatenated feature grid.

Patch size is fixed at 1: every spatial position of the (W*G) x (W*G) x C
grid becomes one token. A learned CLS token is prepended and a learned
positional table (one per supported grid width) is added. The encoder is a
stack of pre-norm blocks; the classification head puts independent sigmoids
on the CLS embedding. Attention matrices can be recorded for rollout maps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .assembly import SUPPORTED_WIDTHS, FeatureGrid
from .errors import ConfigError, ContractError, DimensionError
from .rng import INIT, stream_rng
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    heads: int
    mlp_dim: int
    embed_dim: int
    n_labels: int
    patch_size: int = 1
    supported_widths: tuple = SUPPORTED_WIDTHS

    def __post_init__(self):
        object.__setattr__(self, "supported_widths", tuple(sorted(int(w) for w in self.supported_widths)))
        if self.patch_size != 1:
            raise ConfigError(f"patch_size is fixed at 1, got {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.heads < 1 or self.mlp_dim < 1 or self.n_labels < 1:
            raise ConfigError("depth must be >= 0; heads, mlp_dim and n_labels must be >= 1")
        if not self.supported_widths or any(w not in SUPPORTED_WIDTHS for w in self.supported_widths):
            raise ConfigError(f"supported widths must be a nonempty subset of {SUPPORTED_WIDTHS}")


def desk_vit_config(n_labels, depth=2, heads=4, mlp_dim=64, embed_dim=32):
    return ViTConfig(depth=depth, heads=heads, mlp_dim=mlp_dim, embed_dim=embed_dim, n_labels=n_labels)


def paper_vit_config(n_labels=41):
    return ViTConfig(depth=6, heads=16, mlp_dim=2048, embed_dim=1024, n_labels=n_labels)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class ViTParams:
    config: ViTConfig
    grid_g: int
    in_channels: int
    proj_w: Tensor = None
    proj_b: Tensor = None
    cls: Tensor = None
    pos: dict = field(default_factory=dict)  # width -> [(W*G)^2 + 1, embed]
    blocks: list = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None

    def named_parameters(self):
        out = [("proj.w", self.proj_w), ("proj.b", self.proj_b), ("cls", self.cls)]
        for w in sorted(self.pos):
            out.append((f"pos.w{w}", self.pos[w]))
        for i, blk in enumerate(self.blocks):
            for f in BlockParams.FIELDS:
                out.append((f"block{i}.{f}", getattr(blk, f)))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def set_frozen(self, frozen):
        for _, p in self.named_parameters():
            p.requires_grad = not frozen
            if frozen:
                p.grad = None

    def token_count(self, width):
        return (width * self.grid_g) ** 2 + 1


@dataclass
class AttentionRecord:
    """Per-layer, per-head post-softmax attention over (T+1) tokens."""

    layers: list = field(default_factory=list)  # each [heads, T+1, T+1]

    def __len__(self):
        return len(self.layers)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_vit(config: ViTConfig, grid_g: int, in_channels: int, seed: int, dtype=np.float64) -> ViTParams:
    """Initialize all ViT parameters; head starts at zero so every label
    begins at probability 0.5."""
    rng = stream_rng(seed, INIT, 1)
    e = config.embed_dim
    params = ViTParams(config=config, grid_g=int(grid_g), in_channels=int(in_channels))
    params.proj_w = _uniform(rng, (in_channels, e), in_channels, dtype)
    params.proj_b = Tensor(np.zeros(e, dtype=dtype), requires_grad=True)
    params.cls = Tensor(rng.uniform(-0.02, 0.02, size=e).astype(dtype), requires_grad=True)
    for w in config.supported_widths:
        t = (w * grid_g) ** 2 + 1
        params.pos[w] = Tensor(rng.uniform(-0.02, 0.02, size=(t, e)).astype(dtype), requires_grad=True)
    for _ in range(config.depth):
        blk = BlockParams(
            ln1_g=Tensor(np.ones(e, dtype=dtype), requires_grad=True),
            ln1_b=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            wq=_uniform(rng, (e, e), e, dtype),
            bq=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            wk=_uniform(rng, (e, e), e, dtype),
            bk=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            wv=_uniform(rng, (e, e), e, dtype),
            bv=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            wo=_uniform(rng, (e, e), e, dtype),
            bo=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            ln2_g=Tensor(np.ones(e, dtype=dtype), requires_grad=True),
            ln2_b=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
            w1=_uniform(rng, (e, config.mlp_dim), e, dtype),
            b1=Tensor(np.zeros(config.mlp_dim, dtype=dtype), requires_grad=True),
            w2=_uniform(rng, (config.mlp_dim, e), config.mlp_dim, dtype),
            b2=Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
        )
        params.blocks.append(blk)
    params.head_w = Tensor(np.zeros((e, config.n_labels), dtype=dtype), requires_grad=True)
    params.head_b = Tensor(np.zeros(config.n_labels, dtype=dtype), requires_grad=True)
    return params


def _check_width(params, width):
    if width not in params.config.supported_widths:
        raise ConfigError(f"grid width {width} unsupported; trained widths are {params.config.supported_widths}")


def tokenize_batch(grids: Tensor, width: int, params: ViTParams) -> Tensor:
    """[B, T, C] grid rows -> [B, T+1, embed] token sequences."""
    _check_width(params, width)
    b, t, c = grids.shape
    if c != params.in_channels or t != (width * params.grid_g) ** 2:
        raise DimensionError(
            f"tokenize: got {t} positions x {c} channels, expected {(width * params.grid_g) ** 2} x {params.in_channels}"
        )
    tok = T.add_bias(T.matmul(grids, params.proj_w), params.proj_b)
    cls_row = T.tile_leading(T.reshape(params.cls, (1, params.config.embed_dim)), b)
    tok = T.concat([cls_row, tok], axis=1)
    return T.add_bias(tok, params.pos[width])


def tokenize(grid: FeatureGrid, params: ViTParams) -> Tensor:
    """FeatureGrid -> [(T+1), embed] tokens: row-major spatial order + CLS."""
    side = grid.data.shape[0]
    flat = T.reshape(grid.data, (1, side * side, grid.channels))
    return T.reshape(tokenize_batch(flat, grid.width, params), (side * side + 1, params.config.embed_dim))


def _attention(x, blk, heads, record):
    """Pre-norm multi-head self-attention on [B, S, E]."""
    b, s, e = x.shape
    dh = e // heads
    h = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = T.add_bias(T.matmul(h, blk.wq), blk.bq)
    k = T.add_bias(T.matmul(h, blk.wk), blk.bk)
    v = T.add_bias(T.matmul(h, blk.wv), blk.bv)
    q = T.transpose(T.reshape(q, (b, s, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, s, heads, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, s, heads, dh)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = T.softmax(scores)
    if record is not None:
        record.layers.append(att.data[0].copy())
    ctx = T.matmul(att, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, e))
    return T.add_bias(T.matmul(ctx, blk.wo), blk.bo)


def encode(tokens: Tensor, params: ViTParams, record_attention=False):
    """Run the pre-norm transformer stack.

    Accepts [S, E] or [B, S, E]; returns the same rank. When recording,
    the batch must be a single sequence.
    """
    squeeze = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    if x.ndim != 3 or x.shape[2] != params.config.embed_dim:
        raise DimensionError(f"encode: expected token width {params.config.embed_dim}, got {tokens.shape}")
    record = None
    if record_attention:
        if x.shape[0] != 1:
            raise ContractError("attention recording supports a single study at a time")
        record = AttentionRecord()
    for blk in params.blocks:
        x = T.add(x, _attention(x, blk, params.config.heads, record))
        h = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
        h = T.gelu(T.add_bias(T.matmul(h, blk.w1), blk.b1))
        h = T.add_bias(T.matmul(h, blk.w2), blk.b2)
        x = T.add(x, h)
    if squeeze:
        x = T.reshape(x, tokens.shape)
    return x, record


def classify(encoded: Tensor, params: ViTParams) -> Tensor:
    """Sigmoid head on the CLS embedding: [L] probabilities (or [B, L])."""
    squeeze = encoded.ndim == 2
    x = T.reshape(encoded, (1,) + encoded.shape) if squeeze else encoded
    cls_tok = T.reshape(T.narrow(x, 1, 0, 1), (x.shape[0], x.shape[2]))
    logits = T.add_bias(T.matmul(cls_tok, params.head_w), params.head_b)
    probs = T.sigmoid(logits)
    if squeeze:
        probs = T.reshape(probs, (params.config.n_labels,))
    return probs


def forward_grid(grid: FeatureGrid, params: ViTParams, record_attention=False):
    """Convenience composition: tokenize -> encode -> classify."""
    tokens = tokenize(grid, params)
    encoded, record = encode(tokens, params, record_attention=record_attention)
    return classify(encoded, params), record


def attention_rollout(record: AttentionRecord) -> np.ndarray:
    """Collapse recorded attention into a [0, 1] spatial heatmap.

    Per layer: average heads, add identity, renormalize rows; multiply the
    layer matrices together; read the CLS row over spatial tokens; reshape
    row-major and min-max normalize. A degenerate (constant-zero) map is
    returned as all zeros with a warning.
    """
    if record is None or len(record.layers) == 0:
        raise ContractError("attention rollout needs at least one recorded layer")
    s = record.layers[0].shape[-1]
    rollout = np.eye(s)
    for layer in record.layers:
        avg = np.asarray(layer, dtype=np.float64).mean(axis=0)
        aug = avg + np.eye(s)
        aug /= aug.sum(axis=-1, keepdims=True)
        rollout = aug @ rollout
    spatial = rollout[0, 1:]
    side = int(round(np.sqrt(s - 1)))
    if side * side != s - 1:
        raise ContractError(f"token count {s - 1} is not a square grid")
    heat = spatial.reshape(side, side)
    lo, hi = heat.min(), heat.max()
    if hi > lo:
        return (heat - lo) / (hi - lo)
    if hi == 0.0:
        warnings.warn("attention rollout is degenerate (no mass on spatial tokens); returning zeros")
        return np.zeros_like(heat)
    return np.ones_like(heat)
