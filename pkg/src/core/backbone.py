"""
Hierarchical shifted-window backbone producing C2..C5 (strides 4, 8, 16, 32).
"""
from dataclasses import dataclass
from typing import List

import numpy as np

from src.core.config import ModelConfig
from src.core.nn import Conv2d, LayerNorm, Linear, Module, ModuleList
from src.core.tensor import DimensionError, Tensor, pad
from src.core.window_attention import SwinBlock


@dataclass
class StageSpec:
    depth: int
    dim: int
    num_heads: int
    window: int


@dataclass
class PyramidFeatures:
    C2: Tensor
    C3: Tensor
    C4: Tensor
    C5: Tensor

    def levels(self) -> List[Tensor]:
        return [self.C2, self.C3, self.C4, self.C5]


def merge_2x2(x: Tensor) -> Tensor:
    """
    Concatenate each 2x2 neighbourhood of [B,H,W,C] into [B,H/2,W/2,4C] in the
    order x[2i,2j], x[2i,2j+1], x[2i+1,2j], x[2i+1,2j+1].
    """
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"merge_2x2 needs even extents, got {H}x{W}")
    return x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H // 2, W // 2, 4 * C)


class PatchEmbed(Module):
    """Non-overlapping 4x4 patches projected to D channels, then layer-normalized."""

    def __init__(self, rng: np.random.Generator, dim: int, patch: int = 4, dtype=np.float64):
        super().__init__()
        self.patch = patch
        self.proj = Conv2d(rng, 3, dim, kernel=patch, stride=patch, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def __call__(self, img: Tensor) -> Tensor:
        squeeze = img.ndim == 3
        if squeeze:
            img = img.reshape(1, *img.shape)
        H, W = img.shape[2:]
        if H % self.patch or W % self.patch:
            raise DimensionError(f"image {H}x{W} not divisible by patch size {self.patch}")
        out = self.norm(self.proj(img).transpose(0, 2, 3, 1))
        return out.reshape(out.shape[1:]) if squeeze else out


class PatchMerging(Module):
    def __init__(self, rng: np.random.Generator, dim: int, dtype=np.float64):
        super().__init__()
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        _, H, W, _ = x.shape
        # odd extents: pad bottom/right by one
        x = pad(x, ((0, 0), (0, H % 2), (0, W % 2), (0, 0)))
        out = self.reduction(self.norm(merge_2x2(x)))
        return out.reshape(out.shape[1:]) if squeeze else out


class Stage(Module):
    def __init__(self, rng: np.random.Generator, spec: StageSpec, mlp_ratio: float, use_rel_bias: bool, zero_init_residual: bool, dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.blocks = ModuleList([
            SwinBlock(
                rng, spec.dim, spec.num_heads, spec.window, shifted=(i % 2 == 1),
                mlp_ratio=mlp_ratio, use_rel_bias=use_rel_bias,
                zero_init_residual=zero_init_residual, dtype=dtype,
            )
            for i in range(spec.depth)
        ])

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def stage_specs(cfg: ModelConfig) -> List[StageSpec]:
    return [
        StageSpec(depth=depth, dim=cfg.embed_dim * 2 ** i, num_heads=heads, window=cfg.backbone_window)
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads))
    ]


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        specs = stage_specs(cfg)
        self.patch_embed = PatchEmbed(rng, cfg.embed_dim, dtype=dtype)
        self.stages = ModuleList([
            Stage(rng, spec, cfg.mlp_ratio, cfg.use_rel_bias, cfg.zero_init_residual, dtype=dtype)
            for spec in specs
        ])
        self.merges = ModuleList([PatchMerging(rng, spec.dim, dtype=dtype) for spec in specs[:-1]])

    def __call__(self, img: Tensor) -> PyramidFeatures:
        H, W = img.shape[-2:]
        if H % 32 or W % 32:
            raise DimensionError(f"backbone input {H}x{W} must be divisible by 32")
        x = self.patch_embed(img)
        features = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            features.append(x)
            if i < len(self.merges):
                x = self.merges[i](x)
        return PyramidFeatures(*features)
