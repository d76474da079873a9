"""
Finite-difference checks for every differentiable op and for the loss of a
tiny detector end to end. All checks run at float64.
"""
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.core.backbone import PatchMerging
from src.core.config import LossWeights, ModelConfig, NeckConfig
from src.core.head import BBox, encode_targets, focal_loss, reg_l1_loss, stack_targets, total_loss
from src.core.model import STRIDE, Detector
from src.core.neck import UpMerging
from src.core.tensor import (
    Tensor,
    concat,
    conv2d,
    gelu,
    grad_check,
    layer_norm,
    no_grad,
    pad,
    relu,
    roll,
    sigmoid,
    softmax_lastdim,
)
from src.core.window_attention import SwinBlock, build_shift_mask, relative_position_bias, window_mhsa

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
F64 = np.float64


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


Check = Tuple[str, Callable[[Tensor], Tensor], Tensor]


def _leaf(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=True)


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=F64))


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _scalarize(rng: np.random.Generator, op: Callable[[Tensor], Tensor], x: Tensor) -> Callable[[Tensor], Tensor]:
    """Random fixed projection of op's output to a scalar."""
    with no_grad():
        shape = op(x).shape
    weights = _const(rng.normal(size=shape))
    return lambda t: (op(t) * weights).sum()


def op_checks(rng: np.random.Generator) -> List[Check]:
    checks: List[Check] = []

    def add(name: str, op: Callable[[Tensor], Tensor], x: Tensor) -> None:
        checks.append((name, _scalarize(rng, op, x), x))

    a = _const(rng.normal(size=(3, 4)))
    row = _const(rng.normal(size=(4,)))
    add("add_broadcast", lambda x: x + row, _leaf(rng.normal(size=(3, 4))))
    add("add_broadcast_rhs", lambda x: a + x, _leaf(rng.normal(size=(4,))))
    add("sub", lambda x: a - x * 2.0, _leaf(rng.normal(size=(3, 4))))
    add("mul_broadcast", lambda x: a * x, _leaf(rng.normal(size=(3, 1))))
    add("div", lambda x: a / x, _leaf(_away_from_zero(rng, (3, 4), 0.5, 1.5)))
    add("pow", lambda x: x ** 3.0, _leaf(rng.normal(size=(5,))))
    add("pow_fractional", lambda x: x ** 0.5, _leaf(rng.uniform(0.5, 2.0, size=(5,))))
    add("exp", lambda x: x.exp(), _leaf(rng.normal(size=(4, 3))))
    add("log", lambda x: x.log(), _leaf(rng.uniform(0.3, 3.0, size=(4, 3))))
    add("abs", lambda x: x.abs(), _leaf(_away_from_zero(rng, (6,))))
    add("clip", lambda x: x.clip(-0.5, 0.5), _leaf(np.array([-1.0, -0.3, 0.1, 0.4, 0.9])))
    add("relu", relu, _leaf(_away_from_zero(rng, (2, 5))))
    add("sigmoid", sigmoid, _leaf(rng.normal(size=(2, 5)) * 3))
    add("gelu", gelu, _leaf(rng.normal(size=(2, 5)) * 2))
    add("sum_axis", lambda x: x.sum(axis=1, keepdims=True), _leaf(rng.normal(size=(3, 4, 2))))
    add("mean", lambda x: x.mean(axis=(0, 2)), _leaf(rng.normal(size=(3, 4, 2))))
    add("reshape_transpose", lambda x: x.reshape(2, 6).transpose(1, 0), _leaf(rng.normal(size=(3, 4))))
    add("getitem_repeated", lambda x: x[np.array([0, 2, 2]), 1:], _leaf(rng.normal(size=(3, 4))))
    add("concat", lambda x: concat([x, a, x * 2.0], axis=0), _leaf(rng.normal(size=(2, 4))))
    add("pad", lambda x: pad(x, ((1, 0), (0, 2))), _leaf(rng.normal(size=(3, 3))))
    add("roll", lambda x: roll(x, (-1, 2), (0, 1)), _leaf(rng.normal(size=(3, 4))))

    w = _const(rng.normal(size=(4, 5)))
    add("matmul_lhs", lambda x: x @ w, _leaf(rng.normal(size=(2, 3, 4))))
    lhs = _const(rng.normal(size=(2, 3, 4)))
    add("matmul_rhs", lambda x: lhs @ x, _leaf(rng.normal(size=(4, 5))))
    add("softmax", softmax_lastdim, _leaf(rng.normal(size=(3, 6))))

    gamma = _const(rng.normal(size=(6,)))
    beta = _const(rng.normal(size=(6,)))
    add("layer_norm", lambda x: layer_norm(x, gamma, beta), _leaf(rng.normal(size=(4, 6))))
    xs = _const(rng.normal(size=(5, 6)))
    add("layer_norm_gamma", lambda g: layer_norm(xs, g, beta), _leaf(rng.normal(size=(6,))))

    kernel = _const(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    kbias = _const(rng.normal(size=(4,)))
    add("conv2d_input", lambda x: conv2d(x, kernel, kbias, stride=1, pad=1), _leaf(rng.normal(size=(2, 3, 6, 6))))
    image = _const(rng.normal(size=(2, 3, 6, 6)))
    add("conv2d_weight", lambda k: conv2d(image, k, kbias, stride=1, pad=1), _leaf(rng.normal(size=(4, 3, 3, 3))))
    add("conv2d_patchify", lambda x: conv2d(x, _const(np.ones((2, 3, 2, 2)) * 0.1), _const(np.zeros(2)), stride=2),
        _leaf(rng.normal(size=(1, 3, 4, 4))))

    # masked window attention over a shifted 4x4 map, window 2
    C, heads, M = 8, 2, 2
    mask = build_shift_mask(4, 4, M)
    w_qkv = _const(rng.normal(size=(C, 3 * C)) * 0.3)
    b_qkv = _const(rng.normal(size=(3 * C,)) * 0.1)
    w_proj = _const(rng.normal(size=(C, C)) * 0.3)
    table = _const(rng.normal(size=((2 * M - 1) ** 2, heads)) * 0.1)
    windows = _const(rng.normal(size=(4, M * M, C)))

    def mhsa(x: Tensor) -> Tensor:
        bias = relative_position_bias(M, heads, table)
        return window_mhsa(x, w_qkv, b_qkv, w_proj, None, heads, bias=bias, mask=mask)

    add("window_mhsa_input", mhsa, _leaf(rng.normal(size=(4, M * M, C))))
    add("window_mhsa_qkv", lambda wq: window_mhsa(windows, wq, b_qkv, w_proj, None, heads,
                                                  bias=relative_position_bias(M, heads, table), mask=mask),
        _leaf(rng.normal(size=(C, 3 * C)) * 0.3))
    add("relative_bias_table", lambda tb: window_mhsa(windows, w_qkv, b_qkv, w_proj, None, heads,
                                                      bias=relative_position_bias(M, heads, tb), mask=mask),
        _leaf(rng.normal(size=((2 * M - 1) ** 2, heads)) * 0.1))

    block = SwinBlock(np.random.default_rng(1), C, heads, window=3, shifted=True, dtype=F64)
    add("swin_block_padded_shifted", block, _leaf(rng.normal(size=(1, 5, 5, C))))
    merge = PatchMerging(np.random.default_rng(2), C, dtype=F64)
    add("patch_merging", merge, _leaf(rng.normal(size=(1, 4, 4, C))))
    up = UpMerging(np.random.default_rng(3), C, dtype=F64)
    add("up_merging", up, _leaf(rng.normal(size=(1, 2, 2, C))))

    target = np.zeros((1, 1, 4, 4))
    target[0, 0, 1, 2] = 1.0
    target[0, 0, 1, 1] = 0.6
    target[0, 0, 2, 2] = 0.3
    checks.append(("focal_loss", lambda x: focal_loss(sigmoid(x), target), _leaf(rng.normal(size=(1, 1, 4, 4)))))
    pos = np.zeros((1, 1, 4, 4))
    pos[0, 0, 1, 2] = 1.0
    reg_target = rng.normal(size=(1, 2, 4, 4))
    reg_pred = reg_target + _away_from_zero(rng, (1, 2, 4, 4), 0.1, 0.5)
    checks.append(("reg_l1_loss", lambda x: reg_l1_loss(x, reg_target, pos), _leaf(reg_pred)))
    return checks


def micro_model_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=8,
        depths=[2, 2, 2, 2],
        num_heads=[1, 2, 2, 4],
        backbone_window=2,
        dtype="float64",
        neck=NeckConfig(window=2, blocks_per_stage=2, head_dim=8),
    )


END_TO_END_PARAMS = (
    "backbone.patch_embed.proj.weight",
    "backbone.stages.0.blocks.1.attn.qkv.weight",
    "backbone.stages.2.blocks.0.attn.rel_bias_table",
    "backbone.merges.1.reduction.weight",
    "neck.stages.0.up.expand.weight",
    "neck.stages.2.skip.proj.bias",
    "neck.stages.2.blocks.1.mlp.fc1.weight",
    "head.hm.out.bias",
    "head.wh.conv.weight",
    "head.off.out.weight",
)


def end_to_end_check(seed: int = 0, max_elements: int = 6) -> List[GradCheckResult]:
    """Loss of the micro detector against encoded targets, checked parameter by parameter."""
    rng = np.random.default_rng(seed)
    detector = Detector(micro_model_config(), seed=seed, dtype="float64")
    images = rng.uniform(0.0, 1.0, size=(2, 3, 32, 32))
    boxes = [[BBox(4.0, 6.0, 13.0, 12.0), BBox(20.0, 18.0, 27.0, 29.0)], [BBox(9.0, 20.0, 16.0, 26.0)]]
    hf = 32 // STRIDE
    targets = stack_targets([encode_targets(b, hf, hf, stride=STRIDE) for b in boxes])
    weights = LossWeights()

    def loss(_: Tensor) -> Tensor:
        return total_loss(detector(images), targets, weights).total

    params = dict(detector.named_parameters())
    results = []
    for name in END_TO_END_PARAMS:
        start = time.time()
        err = grad_check(loss, params[name], eps=1e-6, floor=1e-6, max_elements=max_elements,
                         rng=np.random.default_rng([seed, len(results)]))
        results.append(GradCheckResult(f"model:{name}", err, MODEL_TOLERANCE, time.time() - start))
    return results


def run_suite(seed: int = 0, include_model: bool = True, only: Optional[str] = None) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, x in op_checks(rng):
        if only and only not in name:
            continue
        start = time.time()
        err = grad_check(fn, x, eps=1e-5, floor=1e-5)
        results.append(GradCheckResult(name, err, OP_TOLERANCE, time.time() - start))
    if include_model and only in (None, "model"):
        results.extend(end_to_end_check(seed))
    return results
