"""
Window partitioning, cyclic shifting, shift masks, relative position bias and
multi-head self-attention restricted to windows.

Feature maps are channels-last: [H, W, C] or batched [B, H, W, C]. Windows are
enumerated row-major over the grid and tokens row-major inside a window.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.core.config import ConfigError
from src.core.nn import LayerNorm, Linear, Module, trunc_normal
from src.core.tensor import DimensionError, Tensor, UsageError, gelu, pad, roll, softmax_lastdim

MASK_VALUE = -1e9

# [num_windows, M*M, M*M] additive mask with entries in {0, MASK_VALUE}
AttnMask = np.ndarray


@dataclass(frozen=True)
class WindowGrid:
    H: int
    W: int
    M: int
    shift: int = 0

    def __post_init__(self):
        if self.shift not in (0, self.M // 2):
            raise UsageError(f"shift must be 0 or {self.M // 2}, got {self.shift}")

    @property
    def padded(self) -> Tuple[int, int]:
        return -(-self.H // self.M) * self.M, -(-self.W // self.M) * self.M

    @property
    def num_windows(self) -> int:
        hp, wp = self.padded
        return (hp // self.M) * (wp // self.M)


def window_partition(x: Tensor, M: int) -> Tensor:
    """[H,W,C] -> [nW, M*M, C]; [B,H,W,C] -> [B, nW, M*M, C]."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, H, W, C = x.shape
    if H % M or W % M:
        raise DimensionError(f"feature map {H}x{W} not divisible by window {M}; pad first")
    out = x.reshape(B, H // M, M, W // M, M, C).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(B, (H // M) * (W // M), M * M, C)
    return out.reshape(out.shape[1:]) if squeeze else out


def window_reverse(windows: Tensor, M: int, H: int, W: int) -> Tensor:
    squeeze = windows.ndim == 3
    if squeeze:
        windows = windows.reshape(1, *windows.shape)
    B, n_windows, N, C = windows.shape
    if H % M or W % M or n_windows != (H // M) * (W // M) or N != M * M:
        raise DimensionError(f"windows {windows.shape} do not tile a {H}x{W} map with window {M}")
    out = windows.reshape(B, H // M, W // M, M, M, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
    return out.reshape(H, W, C) if squeeze else out


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Torus roll: out[i, j] = x[(i - dy) mod H, (j - dx) mod W]."""
    H, W = x.shape[-3], x.shape[-2]
    dy, dx = dy % H, dx % W
    if dy == 0 and dx == 0:
        return x
    return roll(x, (dy, dx), (x.ndim - 3, x.ndim - 2))


def _region_labels(H: int, W: int, M: int, shift: int) -> np.ndarray:
    """Label each token of the shifted (padded) map by its pre-shift region."""
    hp, wp = -(-H // M) * M, -(-W // M) * M
    labels = np.zeros((hp, wp), dtype=np.int64)
    cuts = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
    count = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = count
            count += 1
    return labels


def _partition_array(a: np.ndarray, M: int) -> np.ndarray:
    """[H, W, ...] numpy -> [nW, M*M, ...] with the same ordering as window_partition."""
    H, W = a.shape[:2]
    rest = a.shape[2:]
    out = a.reshape(H // M, M, W // M, M, *rest).swapaxes(1, 2)
    return out.reshape((H // M) * (W // M), M * M, *rest)


def build_shift_mask(H: int, W: int, M: int) -> AttnMask:
    """
    Additive mask for shifted windows of size M on an HxW map (padded up to
    multiples of M). Token pairs from different pre-shift regions get
    MASK_VALUE, pairs from the same region get 0.
    """
    if M < 2:
        raise UsageError(f"shifted windows need M >= 2, got {M}")
    labels = _partition_array(_region_labels(H, W, M, M // 2), M)
    different = labels[:, :, None] != labels[:, None, :]
    return np.where(different, MASK_VALUE, 0.0)


def build_padding_mask(H: int, W: int, M: int, shift: int) -> Optional[AttnMask]:
    """Mask keys that are right/bottom padding (after the cyclic shift), or None without padding."""
    hp, wp = -(-H // M) * M, -(-W // M) * M
    if hp == H and wp == W:
        return None
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:H, :W] = True
    if shift:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    keys = _partition_array(valid, M)
    n = M * M
    return np.where(keys[:, None, :], 0.0, MASK_VALUE) * np.ones((1, n, 1))


def relative_position_index(M: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + M - 1) * (2 * M - 1) + (rel[1] + M - 1)


def relative_position_bias(M: int, num_heads: int, table: Tensor) -> Tensor:
    """Gather the [(2M-1)^2, heads] table into a [heads, M*M, M*M] bias."""
    if table.shape != ((2 * M - 1) ** 2, num_heads):
        raise DimensionError(f"bias table {table.shape} does not match M={M}, heads={num_heads}")
    index = relative_position_index(M).reshape(-1)
    return table[index].reshape(M * M, M * M, num_heads).transpose(2, 0, 1)


def window_mhsa(
    x_windows: Tensor,
    w_qkv: Tensor,
    b_qkv: Optional[Tensor],
    w_proj: Tensor,
    b_proj: Optional[Tensor],
    num_heads: int,
    bias: Optional[Tensor] = None,
    mask: Optional[AttnMask] = None,
    return_attention: bool = False,
):
    """
    softmax(Q K^T / sqrt(d) + bias + mask) V per window and head, heads
    concatenated, then projected.

    x_windows is [..., nW, N, C]; the mask, when given, is [nW, N, N] and is
    broadcast over every leading dimension and head.
    """
    *lead, N, C = x_windows.shape
    if C % num_heads:
        raise ConfigError(f"channels {C} not divisible by {num_heads} heads")
    d = C // num_heads

    x = x_windows.reshape(-1, N, C)
    qkv = x @ w_qkv
    if b_qkv is not None:
        qkv = qkv + b_qkv
    qkv = qkv.reshape(-1, N, 3, num_heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]

    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        n_windows = mask.shape[0]
        if x.shape[0] % n_windows:
            raise DimensionError(f"{x.shape[0]} windows cannot carry a mask for {n_windows} windows")
        logits = logits.reshape(-1, n_windows, num_heads, N, N) + mask.astype(logits.dtype)[None, :, None]
        logits = logits.reshape(-1, num_heads, N, N)
    attn = softmax_lastdim(logits)

    out = (attn @ v).transpose(0, 2, 1, 3).reshape(-1, N, C) @ w_proj
    if b_proj is not None:
        out = out + b_proj
    out = out.reshape(*lead, N, C)
    if return_attention:
        return out, attn.reshape(*lead, num_heads, N, N)
    return out


class WindowAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, window: int, use_rel_bias: bool = True, dtype=np.float64):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.window = window
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.rel_bias_table: Optional[Tensor] = None
        if use_rel_bias:
            self.rel_bias_table = Tensor(
                trunc_normal(rng, ((2 * window - 1) ** 2, num_heads), dtype=dtype), requires_grad=True
            )

    def __call__(self, x_windows: Tensor, mask: Optional[AttnMask] = None) -> Tensor:
        bias = None
        if self.rel_bias_table is not None:
            bias = relative_position_bias(self.window, self.num_heads, self.rel_bias_table)
        return window_mhsa(
            x_windows, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.num_heads, bias=bias, mask=mask,
        )


class Mlp(Module):
    def __init__(self, rng: np.random.Generator, dim: int, ratio: float, dtype=np.float64):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SwinBlock(Module):
    """
    Pre-norm transformer block over (shifted) windows of a [B,H,W,C] map:
    x + MHSA(LN(x)), then + MLP(LN(.)).
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        num_heads: int,
        window: int,
        shifted: bool,
        mlp_ratio: float = 4.0,
        use_rel_bias: bool = True,
        zero_init_residual: bool = False,
        dtype=np.float64,
    ):
        super().__init__()
        if shifted and window < 2:
            raise ConfigError(f"shifted block needs window >= 2, got {window}")
        self.window = window
        self.shift = window // 2 if shifted else 0
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(rng, dim, num_heads, window, use_rel_bias=use_rel_bias, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, mlp_ratio, dtype=dtype)
        if zero_init_residual:
            self.attn.proj.weight.data[...] = 0.0
            self.mlp.fc2.weight.data[...] = 0.0
        self._mask_cache = {}

    def attention_mask(self, H: int, W: int) -> Optional[AttnMask]:
        key = (H, W)
        if key not in self._mask_cache:
            mask = build_shift_mask(H, W, self.window) if self.shift else None
            padding = build_padding_mask(H, W, self.window, self.shift)
            if padding is not None:
                mask = padding if mask is None else np.minimum(mask, padding)
            self._mask_cache[key] = mask
        return self._mask_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        M = self.window
        hp, wp = -(-H // M) * M, -(-W // M) * M

        h = self.norm1(x)
        h = pad(h, ((0, 0), (0, hp - H), (0, wp - W), (0, 0)))
        if self.shift:
            h = cyclic_shift(h, -self.shift, -self.shift)
        windows = window_partition(h, M)
        windows = self.attn(windows, mask=self.attention_mask(H, W))
        h = window_reverse(windows, M, hp, wp)
        if self.shift:
            h = cyclic_shift(h, self.shift, self.shift)
        if hp != H or wp != W:
            h = h[:, :H, :W, :]

        x = x + h
        return x + self.mlp(self.norm2(x))
