"""
共享的 Transformer 组件：词嵌入（硬/软输入）、带相对位置偏置的自注意力层、
MLM 投影头与 RTD 头
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Collection, List, Optional

import numpy as np

from amos import autodiff as ad
from amos.autodiff import ParameterSet, Tensor
from amos.errors import DataError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

SHARED_EMBEDDING = "shared.token_embedding"
INIT_STD = 0.02
PAD_PENALTY = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    hidden_size: int = 128
    num_attention_heads: int = 4
    ffn_size: int = 256
    num_buckets: int = 16
    max_relative_distance: int = 64
    dropout_rate: float = 0.1
    vocab_size: int = 32

    def validate(self) -> None:
        if self.hidden_size % self.num_attention_heads:
            raise ShapeError(f"hidden_size {self.hidden_size} not divisible by "
                             f"{self.num_attention_heads} attention heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.num_layers < 1 or self.vocab_size < 4:
            raise ShapeError("encoder needs >= 1 layer and a vocab of >= 4 tokens")
        if self.num_buckets < 4 or self.max_relative_distance <= self.num_buckets // 4:
            raise ShapeError(f"relative bias needs >= 4 buckets and max distance > "
                             f"{self.num_buckets // 4}, got {self.num_buckets}/{self.max_relative_distance}")

    def without_dropout(self) -> "EncoderConfig":
        return replace(self, dropout_rate=0.0)


@dataclass
class LayerStates:
    """states[0] 为嵌入输出，states[l] 为第 l 层输出"""

    states: List[Tensor]

    def __getitem__(self, layer: int) -> Tensor:
        return self.states[layer]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def top(self) -> Tensor:
        return self.states[-1]


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """截断在 ±2σ 的正态初始化"""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


def init_shared_embedding(params: ParameterSet, vocab_size: int, hidden_size: int,
                          rng: np.random.Generator) -> Tensor:
    return params.add(SHARED_EMBEDDING, truncated_normal(rng, (vocab_size, hidden_size)), "shared")


def _init_layer_norm(params: ParameterSet, prefix: str, size: int, owner: str) -> None:
    params.add(f"{prefix}.gain", np.ones(size), owner)
    params.add(f"{prefix}.bias", np.zeros(size), owner)


def _init_dense(params: ParameterSet, prefix: str, fan_in: int, fan_out: int, owner: str,
                rng: np.random.Generator) -> None:
    params.add(f"{prefix}.w", truncated_normal(rng, (fan_in, fan_out)), owner)
    params.add(f"{prefix}.b", np.zeros(fan_out), owner)


def init_encoder_params(params: ParameterSet, prefix: str, config: EncoderConfig, owner: str,
                        rng: np.random.Generator) -> None:
    """每层独立的注意力、FFN、层归一化与相对位置偏置表"""
    config.validate()
    h = config.hidden_size
    for layer in range(1, config.num_layers + 1):
        p = f"{prefix}.layer{layer}"
        _init_layer_norm(params, f"{p}.ln_attn", h, owner)
        for name in ("query", "key", "value", "output"):
            _init_dense(params, f"{p}.attn.{name}", h, h, owner, rng)
        params.add(f"{p}.attn.rel_bias",
                   truncated_normal(rng, (config.num_buckets, config.num_attention_heads)), owner)
        _init_layer_norm(params, f"{p}.ln_ffn", h, owner)
        _init_dense(params, f"{p}.ffn.in", h, config.ffn_size, owner, rng)
        _init_dense(params, f"{p}.ffn.out", config.ffn_size, h, owner, rng)


def init_projection_head(params: ParameterSet, prefix: str, hidden_size: int, owner: str,
                         rng: np.random.Generator) -> None:
    _init_dense(params, f"{prefix}.dense", hidden_size, hidden_size, owner, rng)
    _init_layer_norm(params, f"{prefix}.ln", hidden_size, owner)


def dense(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def layer_norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return ad.layer_norm(x) * params[f"{prefix}.gain"] + params[f"{prefix}.bias"]


def embed(inputs, shared: Tensor) -> Tensor:
    """
    硬输入（整数 id）：查表；软输入（概率行）：按分布加权求和嵌入行。
    恰为 one-hot 的软行与硬查表结果相同
    """
    vocab_size = shared.shape[0]
    if isinstance(inputs, np.ndarray) and np.issubdtype(inputs.dtype, np.integer):
        if inputs.size and (inputs.max() >= vocab_size or inputs.min() < 0):
            raise DataError(f"token id out of range for vocab of {vocab_size}")
        return ad.embedding(shared, inputs)
    soft = ad.as_tensor(inputs)
    if soft.shape[-1] != vocab_size:
        raise ShapeError(f"soft rows have width {soft.shape[-1]}, vocab has {vocab_size}")
    if (soft.data < 0).any() or not np.allclose(soft.data.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6):
        raise DataError("soft input rows must be nonnegative and sum to 1")
    return soft @ shared


@lru_cache(maxsize=32)
def relative_position_buckets(seq_len: int, num_buckets: int, max_distance: int) -> np.ndarray:
    """
    T5 风格的双向分桶：一半桶给正向距离；每一半中较近的距离精确成桶，
    较远的按对数间隔直到 max_distance
    """
    context = np.arange(seq_len)[:, None]
    memory = np.arange(seq_len)[None, :]
    relative = memory - context
    half = num_buckets // 2
    buckets = (relative > 0).astype(np.int64) * half
    n = np.abs(relative)
    max_exact = max(1, half // 2)
    is_small = n < max_exact
    scaled = np.log(np.maximum(n, 1) / max_exact) / np.log(max_distance / max_exact)
    large = max_exact + (scaled * (half - max_exact)).astype(np.int64)
    large = np.minimum(large, half - 1)
    buckets += np.where(is_small, n, large)
    buckets.setflags(write=False)
    return buckets


def attention_scores(x: Tensor, params: ParameterSet, prefix: str, config: EncoderConfig,
                     pad_mask: Optional[np.ndarray] = None):
    """返回 (scores, value)：scores 形状 (B, heads, T, T)，已含相对位置偏置与 PAD 屏蔽"""
    batch, seq_len, hidden = x.shape
    heads = config.num_attention_heads
    head_dim = hidden // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, seq_len, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(dense(x, params, f"{prefix}.query"))
    k = split(dense(x, params, f"{prefix}.key"))
    v = split(dense(x, params, f"{prefix}.value"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
    buckets = relative_position_buckets(seq_len, config.num_buckets, config.max_relative_distance)
    bias = ad.embedding(params[f"{prefix}.rel_bias"], buckets).transpose(2, 0, 1)
    scores = scores + bias
    if pad_mask is not None and pad_mask.any():
        penalty = np.where(pad_mask, PAD_PENALTY, 0.0)[:, None, None, :]
        scores = scores + ad.constant(penalty)
    return scores, v


def self_attention(x: Tensor, params: ParameterSet, prefix: str, config: EncoderConfig,
                   pad_mask: Optional[np.ndarray], rng: Optional[np.random.Generator]) -> Tensor:
    batch, seq_len, hidden = x.shape
    scores, v = attention_scores(x, params, prefix, config, pad_mask)
    probs = ad.dropout(ad.softmax(scores, axis=-1), config.dropout_rate, rng)
    context = (probs @ v).transpose(0, 2, 1, 3).reshape(batch, seq_len, hidden)
    return dense(context, params, f"{prefix}.output")


def encoder_layer(x: Tensor, params: ParameterSet, prefix: str, config: EncoderConfig,
                  pad_mask: Optional[np.ndarray], rng: Optional[np.random.Generator]) -> Tensor:
    """Pre-LN：x + Attn(LN(x))，再 x + FFN(LN(x))"""
    attn = self_attention(layer_norm(x, params, f"{prefix}.ln_attn"), params, f"{prefix}.attn",
                          config, pad_mask, rng)
    x = x + ad.dropout(attn, config.dropout_rate, rng)
    hidden = ad.gelu(dense(layer_norm(x, params, f"{prefix}.ln_ffn"), params, f"{prefix}.ffn.in"))
    ffn = dense(hidden, params, f"{prefix}.ffn.out")
    return x + ad.dropout(ffn, config.dropout_rate, rng)


def encode(inputs: Tensor, config: EncoderConfig, params: ParameterSet, prefix: str,
           pad_mask: Optional[np.ndarray] = None, dropout_enabled: bool = False,
           rng: Optional[np.random.Generator] = None, num_layers: Optional[int] = None,
           detach_after: Collection[int] = ()) -> LayerStates:
    """
    逐层编码并返回所有中间层输出。
    detach_after 中的层：记录的输出保留梯度，传给下一层的输入先 stop_gradient
    """
    if inputs.ndim != 3 or inputs.shape[-1] != config.hidden_size:
        raise ShapeError(f"encoder input must be batch x seq_len x {config.hidden_size}, got {inputs.shape}")
    if dropout_enabled and rng is None:
        raise ValueError("dropout_enabled requires an rng")
    rng = rng if dropout_enabled else None
    depth = config.num_layers if num_layers is None else num_layers
    states = [inputs]
    x = inputs
    for layer in range(1, depth + 1):
        x = encoder_layer(x, params, f"{prefix}.layer{layer}", config, pad_mask, rng)
        if not np.all(np.isfinite(x.data)):
            raise NumericalError(f"non-finite activations after {prefix} layer {layer}")
        states.append(x)
        if layer in detach_after and layer < depth:
            x = ad.stop_gradient(x)
    return LayerStates(states)


def projection_head(f: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """dense + GELU + LayerNorm，把层输出 f 映射为 h"""
    return layer_norm(ad.gelu(dense(f, params, f"{prefix}.dense")), params, f"{prefix}.ln")


def mlm_logits(hidden: Tensor, shared: Tensor, detach_embedding: bool = False) -> Tensor:
    """logits[t] = x_t^T h，x_t 为共享词嵌入的第 t 行"""
    table = ad.stop_gradient(shared) if detach_embedding else shared
    return hidden @ table.transpose(1, 0)


def rtd_logit(hidden: Tensor, w: Tensor) -> Tensor:
    """每个位置一个标量 logit = w^T h；sigmoid(logit) 为原词概率"""
    return (hidden * w).sum(axis=-1)
