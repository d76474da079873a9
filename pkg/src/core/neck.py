"""
Shifted-window neck: Swin blocks at a small window size, Up Merging between
stages, and skip merges with C4, C3, C2. Input C5, output stride 4 with D
channels.
"""
import numpy as np

from src.core.backbone import PyramidFeatures
from src.core.config import ConfigError, NeckConfig
from src.core.nn import LayerNorm, Linear, Module, ModuleList
from src.core.tensor import DimensionError, Tensor, concat
from src.core.window_attention import SwinBlock


def pixel_shuffle_2x2(x: Tensor) -> Tensor:
    """
    [B,H,W,4C] -> [B,2H,2W,C]: channel quadruple (c, c+C, c+2C, c+3C) at (i,j)
    lands on (2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1). Exact inverse of merge_2x2.
    """
    B, H, W, C4 = x.shape
    if C4 % 4:
        raise ConfigError(f"up merging needs channels divisible by 4, got {C4}")
    c = C4 // 4
    return x.reshape(B, H, W, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, c)


class UpMerging(Module):
    """Sub-pixel shuffle [H,W,4C] -> [2H,2W,C], layer norm, linear C -> 2C."""

    def __init__(self, rng: np.random.Generator, in_dim: int, dtype=np.float64):
        super().__init__()
        if in_dim % 4:
            raise ConfigError(f"up merging needs channels divisible by 4, got {in_dim}")
        c = in_dim // 4
        self.norm = LayerNorm(c, dtype=dtype)
        self.expand = Linear(rng, c, 2 * c, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        out = self.expand(self.norm(pixel_shuffle_2x2(x)))
        return out.reshape(out.shape[1:]) if squeeze else out


class SkipMerge(Module):
    """Concatenate neck and backbone features (2K channels), project back to K."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype=np.float64):
        super().__init__()
        self.proj = Linear(rng, 2 * dim, dim, dtype=dtype)

    def __call__(self, up: Tensor, skip: Tensor) -> Tensor:
        if up.shape != skip.shape:
            raise DimensionError(f"skip merge shape mismatch: {up.shape} vs {skip.shape}")
        return self.proj(concat([up, skip], axis=-1))


class NeckStage(Module):
    def __init__(self, rng: np.random.Generator, dim: int, cfg: NeckConfig, dtype=np.float64):
        super().__init__()
        heads = max(1, dim // cfg.head_dim)
        if dim % heads:
            raise ConfigError(f"neck dim {dim} not divisible by {heads} heads")
        self.blocks = ModuleList([
            SwinBlock(
                rng, dim, heads, cfg.window, shifted=(i % 2 == 1),
                mlp_ratio=cfg.mlp_ratio, use_rel_bias=cfg.use_rel_bias, dtype=dtype,
            )
            for i in range(cfg.blocks_per_stage)
        ])
        self.up = UpMerging(rng, dim, dtype=dtype)
        self.skip = SkipMerge(rng, dim // 2, dtype=dtype)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.skip(self.up(x), skip)


class Neck(Module):
    def __init__(self, rng: np.random.Generator, embed_dim: int, cfg: NeckConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.stages = ModuleList([NeckStage(rng, embed_dim * 2 ** level, cfg, dtype=dtype) for level in (3, 2, 1)])

    def __call__(self, feats: PyramidFeatures) -> Tensor:
        x = feats.C5
        for stage, skip in zip(self.stages, (feats.C4, feats.C3, feats.C2)):
            x = stage(x, skip)
        return x
