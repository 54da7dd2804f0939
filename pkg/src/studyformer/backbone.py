"""Convolutional feature extractor applied identically to every view.

A plain stack of conv(3x3) -> channel norm -> GELU -> average-pool stages
followed by a 1x1 projection to the output channel count. Only the
input/output contract matters to the rest of the architecture: an S x S RGB
view becomes a G x G x C feature map. The paper-scale preset maps
3x320x320 -> 1024x10x10; the desk preset maps 3x64x64 -> 32x4x4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import INIT, stream_rng
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int
    stage_channels: tuple
    downsample: tuple
    out_channels: int
    out_grid: int

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "downsample", tuple(int(f) for f in self.downsample))
        if len(self.stage_channels) != len(self.downsample) or not self.stage_channels:
            raise ConfigError(
                f"stage_channels ({len(self.stage_channels)}) and downsample ({len(self.downsample)}) "
                "must be equal-length and nonempty"
            )
        if any(c < 1 for c in self.stage_channels) or any(f < 1 for f in self.downsample):
            raise ConfigError("stage channels and downsample factors must be >= 1")
        if self.out_channels < 1 or self.out_grid < 1:
            raise ConfigError("out_channels and out_grid must be >= 1")
        prod = int(np.prod(self.downsample))
        if prod * self.out_grid != self.input_size:
            raise ConfigError(
                f"prod(downsample) * out_grid must equal input_size: {prod} * {self.out_grid} != {self.input_size}"
            )


DESK_BACKBONE = BackboneConfig(input_size=64, stage_channels=(16, 32), downsample=(4, 4), out_channels=32, out_grid=4)
PAPER_BACKBONE = BackboneConfig(
    input_size=320, stage_channels=(32, 64, 128, 256, 512), downsample=(2, 2, 2, 2, 2), out_channels=1024, out_grid=10
)


@dataclass
class BackboneParams:
    config: BackboneConfig
    stages: list = field(default_factory=list)  # dicts with w, b
    proj_w: Tensor = None
    proj_b: Tensor = None
    frozen: bool = False

    def named_parameters(self):
        out = []
        for i, st in enumerate(self.stages):
            for key in ("w", "b"):
                out.append((f"stage{i}.{key}", st[key]))
        out.append(("proj.w", self.proj_w))
        out.append(("proj.b", self.proj_b))
        return out

    def set_frozen(self, frozen):
        """Frozen parameters record no gradients and allocate no buffers."""
        self.frozen = bool(frozen)
        for _, p in self.named_parameters():
            p.requires_grad = not self.frozen
            if self.frozen:
                p.grad = None


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_backbone(config: BackboneConfig, seed: int, dtype=np.float64) -> BackboneParams:
    """Fan-in-scaled uniform init; bitwise reproducible for a given seed."""
    rng = stream_rng(seed, INIT, 0)
    params = BackboneParams(config=config)
    cin = 3
    for ch in config.stage_channels:
        st = {
            "w": _uniform(rng, (ch, cin, 3, 3), cin * 9, dtype),
            "b": Tensor(np.zeros(ch, dtype=dtype), requires_grad=True),
        }
        params.stages.append(st)
        cin = ch
    params.proj_w = _uniform(rng, (config.out_channels, cin, 1, 1), cin, dtype)
    params.proj_b = Tensor(np.zeros(config.out_channels, dtype=dtype), requires_grad=True)
    return params


def extract_features(params: BackboneParams, batch: Tensor) -> Tensor:
    """Map a batch of views [B,3,S,S] to feature maps [B,C,G,G]."""
    cfg = params.config
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise DimensionError(f"extract_features: expected [B,3,{cfg.input_size},{cfg.input_size}], got {batch.shape}")
    h = batch
    for st, factor in zip(params.stages, cfg.downsample):
        # even factors downsample partly inside the conv (stride 2); the
        # spatial extent ahead of an even factor is always even, so the
        # strided conv divides it exactly
        stride = 2 if factor % 2 == 0 else 1
        h = T.conv2d(h, st["w"], st["b"], stride=stride, padding=1)
        h = T.gelu(h)
        if factor // stride > 1:
            h = T.avg_pool2d(h, factor // stride)
    return T.conv2d(h, params.proj_w, params.proj_b)
