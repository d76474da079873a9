"""
Adam with decoupled weight decay, and global-norm gradient clipping.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.nn import Param


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: Optional[Sequence[bool]] = None,
) -> AdamState:
    """
    One in-place update of `params`:

        m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
        p -= lr * wd * p                      (decayed params only)
        p -= lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    decay_mask = decay_mask if decay_mask is not None else [True] * len(params)

    for p, g, m, v, decay in zip(params, grads, state.m, state.v, decay_mask):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def global_grad_norm(params: Sequence[Param]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.tensor.grad, dtype=np.float64))) for p in params)))


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Scales gradients in place so their global L2 norm is at most max_norm; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.tensor.grad[...] *= scale
    return norm


class Adam:
    def __init__(
        self,
        params: Sequence[Param],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.tensor.data for p in self.params])

    def step(self) -> None:
        adam_step(
            [p.tensor.data for p in self.params],
            [p.tensor.grad for p in self.params],
            self.state,
            lr=self.lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
            decay_mask=[p.decay for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def reset(self) -> None:
        self.state = AdamState.zeros_like([p.tensor.data for p in self.params])

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"optim.step": np.array([self.state.step], dtype=np.int64)}
        for p, m, v in zip(self.params, self.state.m, self.state.v):
            out[f"optim.m.{p.name}"] = m.copy()
            out[f"optim.v.{p.name}"] = v.copy()
        return out

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        if "optim.step" not in tensors:
            raise KeyError("optimizer state missing from checkpoint")
        self.state.step = int(tensors["optim.step"][0])
        for i, p in enumerate(self.params):
            self.state.m[i] = np.array(tensors[f"optim.m.{p.name}"], dtype=p.tensor.dtype)
            self.state.v[i] = np.array(tensors[f"optim.v.{p.name}"], dtype=p.tensor.dtype)
