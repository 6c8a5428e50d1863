"""Parameter bookkeeping and init helpers shared by the small models."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class ParamStore:
    """Named trainable tensors with freeze / serialize / checksum support."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name '{name}'")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise ContractError(f"checkpoint is missing parameter '{name}'")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter '{name}' shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None

    def freeze(self):
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        for p in self._params.values():
            p.requires_grad = True

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def checksum(self) -> str:
        """Digest over all parameter bytes; detects any weight mutation."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(p.data.size for p in self._params.values())


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) where x is (..., fan_in) and w is (fan_in, fan_out)."""
    lead = x.shape[:-1]
    flat = x.reshape((int(np.prod(lead)) if lead else 1, x.shape[-1]))
    out = T.matmul(flat, w)
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[-1],))


def sinusoidal_embedding(t: np.ndarray, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style timestep embedding; returns (len(t), dim) float32."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)
