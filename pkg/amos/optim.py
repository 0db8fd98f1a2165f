"""
Adam（不带权重衰减）与全局梯度范数裁剪
"""

from __future__ import annotations

import logging
from typing import Dict, Iterable, Optional

import numpy as np

from amos.autodiff import ParameterSet
from amos.errors import CheckpointError

logger = logging.getLogger(__name__)


def global_grad_norm(params: ParameterSet, names: Optional[Iterable[str]] = None) -> float:
    names = list(params) if names is None else list(names)
    return float(np.sqrt(sum(float(np.sum(params[n].grad ** 2)) for n in names)))


def clip_grad_norm(params: ParameterSet, max_norm: float, names: Optional[Iterable[str]] = None) -> float:
    """按全局 L2 范数裁剪，返回裁剪前的范数"""
    names = list(params) if names is None else list(names)
    norm = global_grad_norm(params, names)
    if norm > max_norm:
        scale = max_norm / norm
        for name in names:
            params[name].grad = params[name].grad * scale
    return norm


class Adam:
    def __init__(self, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, lr: float, frozen: Iterable[str] = ()) -> None:
        """frozen 中的参数既不更新也不累积动量"""
        frozen = set(frozen)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.items():
            if name in frozen:
                continue
            g = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.t": np.asarray(self.t, dtype=np.int64)}
        for name in self.m:
            state[f"adam.m.{name}"] = self.m[name].copy()
            state[f"adam.v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        try:
            self.t = int(state["adam.t"])
            for name in self.m:
                m = np.asarray(state[f"adam.m.{name}"], dtype=np.float64)
                v = np.asarray(state[f"adam.v.{name}"], dtype=np.float64)
                if m.shape != self.m[name].shape or v.shape != self.v[name].shape:
                    raise CheckpointError(f"optimizer moment shape mismatch for {name}")
                self.m[name] = m.copy()
                self.v[name] = v.copy()
        except KeyError as exc:
            raise CheckpointError(f"optimizer state is missing {exc.args[0]!r}") from None
