"""
Parameter containers and the small set of layers the detector is built from.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.core.tensor import Tensor, conv2d, layer_norm


@dataclass
class Param:
    name: str
    tensor: Tensor

    @property
    def decay(self) -> bool:
        # matrices and kernels only; biases, norms and bias tables are exempt
        return self.tensor.ndim >= 2 and not self.name.endswith("rel_bias_table")


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.normal(0.0, 1.0, size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Attribute-registered tree of parameters and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Param]:
        return [Param(name, tensor) for name, tensor in self.named_parameters()]

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={missing[:5]}, unexpected={unexpected[:5]}")
        for name, tensor in own.items():
            if state[name].shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {tensor.shape}")
            tensor.data = np.array(state[name], dtype=tensor.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(tensor.size for _, tensor in self.named_parameters())


class ModuleList(Module):
    def __init__(self, modules: List[Module]):
        super().__init__()
        self._items = list(modules)
        for i, module in enumerate(modules):
            setattr(self, str(i), module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ weight + bias, weight stored [in, out]."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, dtype=np.float64):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.bias: Optional[Tensor] = None
        if bias:
            self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        dtype=np.float64,
    ):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(he_normal(rng, (c_out, c_in, kernel, kernel), fan_in, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
