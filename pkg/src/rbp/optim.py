"""Adam and momentum-SGD over named parameter dicts.

Both optimizers minimize: they apply ``param -= update(grad)``.  Updates are
in place and deterministic given identical inputs and state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


@dataclass
class ParamStore:
    """Named parameter arrays plus per-parameter optimizer state.

    Insertion order is the canonical serialization order, so it must follow
    the model's layer order.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opt_state: dict[str, dict[str, np.ndarray | int]] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self.tensors[name] = value

    def param_count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _check_grads(params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_grads(params, grads)
        for name, g in grads.items():
            p = params[name]
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
                self.state[name] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, lr: float = 1e-4, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_grads(params, grads)
        for name, g in grads.items():
            p = params[name]
            if self.momentum != 0.0:
                st = self.state.get(name)
                if st is None:
                    st = {"buf": np.zeros_like(p)}
                    self.state[name] = st
                st["buf"] = self.momentum * st["buf"] + g
                g = st["buf"]
            p -= (self.lr * g).astype(p.dtype, copy=False)
