"""
反向模式自动微分
动态 Tape（前向时记录），显式 stop_gradient / gradient_reversal 原语，
以及基于中心差分的梯度校验
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

OWNERS = ("gen", "disc", "mixture", "shared", "probe")


class _ThreadState(threading.local):
    """每个线程各自的活动 Tape 与边界回放栈"""

    def __init__(self):
        self.tapes: List["Tape"] = []
        self.boundaries: List["BoundaryReplay"] = []


_STATE = _ThreadState()


class Tensor:
    """n 维可微张量：float64 数据 + 同形状梯度累加器"""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # 运算符
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value)


class Tape:
    """前向记录的操作序列；按记录的逆序回放即为反向传播"""

    def __init__(self):
        self._nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tapes.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self._nodes:
            node.grad = None
        if loss._backward is None:
            if loss.requires_grad:
                loss.grad = loss.grad + 1.0
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + g

    def clear(self) -> None:
        """释放所有记录的节点；参数（叶子）不受影响"""
        for node in self._nodes:
            node._parents = ()
            node._backward = None
            node.grad = None
        self._nodes = []


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _STATE.tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _STATE.tapes[-1].record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---- 逐元素运算 ----

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh 近似的 GELU"""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), backward)


# ---- 归约与形状 ----

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def scatter_add(base: Tensor, index, values: Tensor) -> Tensor:
    """out = base；out[index] += values"""
    out = base.data.copy()
    np.add.at(out, index, values.data)
    return _make(out, (base, values), lambda g: (g, g[index]))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), backward)


# ---- 数值稳定的 softmax 族 ----

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """逐行负对数似然，形状 (N,)"""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    return -getitem(log_softmax(logits, axis=-1), (rows, targets))


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """最后一维标准化（不含仿射部分）"""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    out = centered * inv

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - out * (g * out).mean(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return a * constant(keep)


# ---- 梯度边界原语 ----

class BoundaryReplay:
    """
    记录 stop_gradient / gradient_reversal / scale_gradient 边界以及
    hold_constant 的值；回放时返回未扰动时的值，使有限差分衡量的正是
    反向传播所计算的替代函数
    """

    def __init__(self):
        self.values: List[np.ndarray] = []
        self.cursor = 0
        self.replaying = False

    def __enter__(self) -> "BoundaryReplay":
        _STATE.boundaries.append(self)
        self.cursor = 0
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.boundaries.remove(self)

    def exchange(self, value: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(np.array(value, copy=True))
            return value
        if self.cursor >= len(self.values):
            raise RuntimeError("boundary replay out of sync with recorded evaluation")
        stored = self.values[self.cursor]
        self.cursor += 1
        return stored


def _boundary(value: np.ndarray) -> np.ndarray:
    if _STATE.boundaries:
        return _STATE.boundaries[-1].exchange(value)
    return value


def hold_constant(value: np.ndarray) -> np.ndarray:
    """离散中间量（例如 Gumbel-max 的硬采样）在梯度校验中视为常量"""
    return _boundary(value)


def stop_gradient(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor(_boundary(x.data))


def _scaled_identity(x: Tensor, factor: float) -> Tensor:
    base = _boundary(x.data)
    if base is x.data:
        out = x.data.copy()
    else:
        out = base + factor * (x.data - base)
    return _make(out, (x,), lambda g: (factor * g,))


def gradient_reversal(x: Tensor, multiplier: float = 1.0) -> Tensor:
    """前向恒等；反向传递 -multiplier × 上游梯度"""
    if not multiplier > 0:
        raise ValueError(f"gradient_reversal multiplier must be > 0, got {multiplier}")
    return _scaled_identity(as_tensor(x), -float(multiplier))


def scale_gradient(x: Tensor, multiplier: float) -> Tensor:
    """前向恒等；反向传递 multiplier × 上游梯度"""
    if not multiplier > 0:
        raise ValueError(f"scale_gradient multiplier must be > 0, got {multiplier}")
    return _scaled_identity(as_tensor(x), float(multiplier))


# ---- 参数集合 ----

class ParameterSet:
    """按所有者分区的命名参数；共享词嵌入只登记一次，被 gen 与 disc 共同引用"""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self._owners: Dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, owner: str) -> Tensor:
        if owner not in OWNERS:
            raise ValueError(f"unknown parameter owner {owner!r}")
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = tensor
        self._owners[name] = owner
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def owner(self, name: str) -> str:
        return self._owners[name]

    def partition(self, owner: str) -> List[str]:
        """某一分区引用的参数名；gen 与 disc 都包含共享嵌入"""
        names = [n for n, o in self._owners.items() if o == owner]
        if owner in ("gen", "disc"):
            names += [n for n, o in self._owners.items() if o == "shared"]
        return names

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, tensor in self._tensors.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tensor.shape}")
            tensor.data = value.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self._tensors[name].data).tobytes())
        return h.hexdigest()


# ---- 梯度校验 ----

@dataclass
class GradientReport:
    """每个参数的最大相对误差"""

    errors: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)
    evaluations: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return not self.failures and self.max_error < tolerance


def check_gradient(fn: Callable[[], Tensor],
                   params: ParameterSet,
                   epsilon: float = 1e-4,
                   names: Optional[Sequence[str]] = None,
                   max_elements: Optional[int] = None,
                   seed: int = 0) -> GradientReport:
    """
    中心差分 (fn(p+ε) - fn(p-ε)) / 2ε 与解析梯度比较。
    误差 = |analytic - numeric| / max(1, |analytic|, |numeric|)
    max_elements 限制每个参数抽查的元素个数
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    names = list(names) if names is not None else list(params)
    report = GradientReport()

    params.zero_grad()
    replay = BoundaryReplay()
    with replay, Tape() as tape:
        loss = fn()
        if not np.all(np.isfinite(loss.data)):
            report.failures.append("non-finite function value at base point")
            return report
        tape.backward(loss)
    tape.clear()
    analytic = {name: params[name].grad.copy() for name in names}

    def evaluate() -> float:
        with replay:
            replay.cursor = 0
            value = fn().item()
        report.evaluations += 1
        return value

    replay.replaying = True
    rng = np.random.default_rng(seed)
    for name in names:
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + epsilon
            plus = evaluate()
            flat[i] = original - epsilon
            minus = evaluate()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                report.failures.append(f"{name}[{i}]: non-finite function value")
                continue
            numeric = (plus - minus) / (2.0 * epsilon)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        report.errors[name] = worst
        logger.debug("gradient check %s: max relative error %.3e", name, worst)
    params.zero_grad()
    return report
