"""
对抗混合：逐掩码位置学习 K 个头的混合权重 γ，用 Gumbel-Softmax 采样替换词，
并通过梯度反转把判别器的梯度接回 γ / v
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from amos import autodiff as ad
from amos.autodiff import Tensor
from amos.data import MaskedBatch
from amos.encoder import mlm_logits
from amos.errors import DataError
from amos.generator import GeneratorForwardResult

logger = logging.getLogger(__name__)

MIXTURE_WEIGHT = "mixture.v"
DEFAULT_TAU = 0.3


@dataclass
class MixtureOutput:
    gamma: Tensor
    h_bar: Tensor
    log_pi: Tensor

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi.data)


@dataclass
class GumbelSample:
    noise: np.ndarray
    soft: Tensor
    hard: np.ndarray
    tau: float


@dataclass
class Provenance:
    """诊断信息：每个掩码位置 γ 最大的头，以及各头在同一噪声下会采出的词"""

    depths: Tuple[int, ...]
    dominant_head: np.ndarray
    head_tokens: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ReplacedBatch:
    """X^rep、原词标记与直通（straight-through）载体"""

    batch: MaskedBatch
    replaced: np.ndarray
    is_original: np.ndarray
    carrier: Tensor
    provenance: Optional[Provenance] = None

    @property
    def positions(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.batch.positions

    @property
    def replaced_count(self) -> int:
        return int((~self.is_original & ~self.batch.pad).sum())


def mixture_weights(result: GeneratorForwardResult, v: Tensor) -> Tensor:
    """γ_i^(d) = softmax_d(v^T f_i^(d))，形状 (M, K)"""
    scores = [(result.f[d] * v).sum(axis=-1) for d in result.depths]
    return ad.softmax(ad.stack(scores, axis=1), axis=-1)


def constant_weights(num_positions: int, weights) -> Tensor:
    """不可学习的 γ：每个位置相同的权重行，或逐位置的权重矩阵"""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = np.tile(weights, (num_positions, 1))
    return ad.constant(weights)


def mixed_distribution(result: GeneratorForwardResult, gamma: Tensor, shared: Tensor,
                       adv_mlm_multiplier: Optional[float] = None) -> MixtureOutput:
    """
    h̄ = Σ_d γ^(d) · sg(h^(d))；π = softmax(x_t^T h̄)。
    adv_mlm_multiplier 给定时，h^(d) 不再截断，判别器侧梯度按该系数缩放后传回
    """
    h_bar = None
    for k, d in enumerate(result.depths):
        if adv_mlm_multiplier is None:
            h = ad.stop_gradient(result.h[d])
        else:
            h = ad.scale_gradient(result.h[d], adv_mlm_multiplier)
        term = gamma[:, k:k + 1] * h
        h_bar = term if h_bar is None else h_bar + term
    log_pi = ad.log_softmax(mlm_logits(h_bar, shared, detach_embedding=True), axis=-1)
    return MixtureOutput(gamma=gamma, h_bar=h_bar, log_pi=log_pi)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """g = -log(-log(u))，u ~ U(0, 1)"""
    u = np.clip(rng.random(shape), np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def log_probabilities(pi) -> Tensor:
    """把概率数组转换为 gumbel_softmax_sample 需要的对数概率，0 概率对应 -inf"""
    with np.errstate(divide="ignore"):
        return ad.constant(np.log(np.asarray(pi, dtype=np.float64)))


def gumbel_softmax_sample(log_pi, tau: float, rng: np.random.Generator) -> GumbelSample:
    """
    软样本 p̂ ∝ exp((log π + g)/τ)；硬样本 = argmax(log π + g)，
    其边缘分布恰为 π。并列时取最小 id。

    log_pi 必须是对数概率（Tensor 或 ndarray 均按对数概率解释）；
    手头是概率时先经 log_probabilities 转换。有限行的 exp 之和不为 1 时报 ValueError
    """
    if not tau > 0:
        raise ValueError(f"Gumbel-Softmax temperature must be > 0, got {tau}")
    if not isinstance(log_pi, Tensor):
        log_pi = ad.constant(np.asarray(log_pi, dtype=np.float64))
    totals = np.exp(log_pi.data).sum(axis=-1)
    totals = totals[np.isfinite(totals)]
    if totals.size and not np.allclose(totals, 1.0, atol=1e-6):
        raise ValueError("gumbel_softmax_sample expects log-probabilities "
                         f"(rows of exp(log_pi) sum to {totals.min():.4g}..{totals.max():.4g}); "
                         "convert probabilities with log_probabilities()")
    noise = gumbel_noise(rng, log_pi.shape)
    perturbed = log_pi + ad.constant(noise)
    soft = ad.softmax(perturbed * (1.0 / tau), axis=-1)
    hard = ad.hold_constant(np.argmax(perturbed.data, axis=-1))
    return GumbelSample(noise=noise, soft=soft, hard=np.asarray(hard, dtype=np.int64), tau=tau)


def trace_provenance(result: GeneratorForwardResult, gamma: Tensor, sample: GumbelSample) -> Provenance:
    depths = result.depths
    dominant = np.asarray(depths)[np.argmax(gamma.data, axis=-1)]
    head_tokens = {}
    for d in depths:
        logits = result.logits[d].data
        log_p = logits - logits.max(axis=-1, keepdims=True)
        log_p = log_p - np.log(np.exp(log_p).sum(axis=-1, keepdims=True))
        head_tokens[d] = np.argmax(log_p + sample.noise, axis=-1)
    return Provenance(depths=depths, dominant_head=dominant, head_tokens=head_tokens)


def build_replaced_sequence(batch: MaskedBatch, sample: GumbelSample, shared: Tensor,
                            provenance: Optional[Provenance] = None,
                            soft_input: bool = False) -> ReplacedBatch:
    """
    掩码位置放入硬采样词，其余位置保持原词。
    载体 = grl(soft_emb) - sg(soft_emb)：前向恰为 0，反向经 p̂ 流向 γ 与 v；
    软路径上的嵌入矩阵截断梯度。soft_input 时前向改用软嵌入
    """
    if sample.hard.shape[0] != batch.num_masked:
        raise DataError(f"{batch.num_masked} masked positions but {sample.hard.shape[0]} samples")
    positions = batch.positions
    replaced = batch.original.copy()
    replaced[positions] = sample.hard
    is_original = replaced == batch.original

    soft_embedding = sample.soft @ ad.stop_gradient(shared)
    if soft_input:
        anchor = ad.constant(shared.data[sample.hard])
    else:
        anchor = ad.stop_gradient(soft_embedding)
    carrier = ad.gradient_reversal(soft_embedding, 1.0) - anchor
    return ReplacedBatch(batch=batch, replaced=replaced, is_original=is_original,
                         carrier=carrier, provenance=provenance)
