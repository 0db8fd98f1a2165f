"""
判别器：在替换序列上做 RTD（逐位置二分类），以及替换词上的指标
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from amos import autodiff as ad
from amos.autodiff import ParameterSet, Tensor
from amos.encoder import (SHARED_EMBEDDING, EncoderConfig, LayerStates, embed, encode,
                          init_encoder_params, layer_norm, rtd_logit, truncated_normal)
from amos.mixture import Provenance, ReplacedBatch

logger = logging.getLogger(__name__)

PREFIX = "disc"
FINAL_NORM = "disc.final_ln"
RTD_WEIGHT = "disc.rtd.w"


@dataclass
class DiscOutput:
    states: LayerStates
    logits: Tensor

    @property
    def p_rtd(self) -> np.ndarray:
        """每个位置是原词的概率；logit 0 处恰为 0.5"""
        z = self.logits.data
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class RTDLabelSet:
    """True = 原词；PAD 位置不参与"""

    original: np.ndarray
    valid: np.ndarray

    @property
    def replaced_count(self) -> int:
        return int((~self.original & self.valid).sum())

    @classmethod
    def from_replaced(cls, replaced: ReplacedBatch) -> "RTDLabelSet":
        return cls(original=replaced.is_original.copy(), valid=~replaced.batch.pad)


@dataclass
class ReplacedTokenMetrics:
    replaced_count: int
    accuracy: Optional[float]
    head_loss: Dict[int, Optional[float]] = field(default_factory=dict)
    head_count: Dict[int, int] = field(default_factory=dict)
    token_losses: List[Tuple[int, float]] = field(default_factory=list)


def init_discriminator_params(params: ParameterSet, config: EncoderConfig, rng: np.random.Generator) -> None:
    init_encoder_params(params, PREFIX, config, "disc", rng)
    params.add(f"{FINAL_NORM}.gain", np.ones(config.hidden_size), "disc")
    params.add(f"{FINAL_NORM}.bias", np.zeros(config.hidden_size), "disc")
    params.add(RTD_WEIGHT, truncated_normal(rng, (config.hidden_size,)), "disc")


def discriminator_inputs(replaced: ReplacedBatch, shared: Tensor) -> Tensor:
    """硬查表嵌入，掩码位置加上直通载体"""
    base = embed(replaced.replaced, shared)
    return ad.scatter_add(base, replaced.positions, replaced.carrier)


def discriminator_forward(replaced: ReplacedBatch, config: EncoderConfig, params: ParameterSet,
                          dropout_rng: Optional[np.random.Generator] = None) -> DiscOutput:
    states = encode(discriminator_inputs(replaced, params[SHARED_EMBEDDING]), config, params, PREFIX,
                    pad_mask=replaced.batch.pad, dropout_enabled=dropout_rng is not None,
                    rng=dropout_rng)
    top = layer_norm(states.top, params, FINAL_NORM)
    return DiscOutput(states=states, logits=rtd_logit(top, params[RTD_WEIGHT]))


def rtd_loss(logits: Tensor, labels: RTDLabelSet) -> Tensor:
    """
    -[y log σ(z) + (1-y) log σ(-z)] 在所有非 PAD 位置上求平均；
    采样恰好等于原词的掩码位置与未改动位置同等对待
    """
    y = labels.original.astype(np.float64)
    valid = labels.valid.astype(np.float64)
    per_position = -(ad.log_sigmoid(logits) * y + ad.log_sigmoid(-logits) * (1.0 - y))
    return (per_position * valid).sum() * (1.0 / valid.sum())


def discriminator_loss(replaced: ReplacedBatch, config: EncoderConfig, params: ParameterSet,
                       dropout_rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, DiscOutput]:
    output = discriminator_forward(replaced, config, params, dropout_rng)
    return rtd_loss(output.logits, RTDLabelSet.from_replaced(replaced)), output


def replaced_token_metrics(output: DiscOutput, labels: RTDLabelSet,
                           provenance: Optional[Provenance] = None,
                           positions: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ReplacedTokenMetrics:
    """
    替换词上的准确率（p_RTD < 0.5 判为替换；恰为 0.5 算作原词），
    以及按 argmax γ 归属到各头的替换词判别损失
    """
    replaced = ~labels.original & labels.valid
    count = int(replaced.sum())
    metrics = ReplacedTokenMetrics(replaced_count=count, accuracy=None)
    if count == 0:
        return metrics
    p = output.p_rtd
    metrics.accuracy = float((p[replaced] < 0.5).mean())

    if provenance is None or positions is None:
        return metrics
    logits = output.logits.data
    for d in provenance.depths:
        metrics.head_loss[d] = None
        metrics.head_count[d] = 0
    sums: Dict[int, float] = {d: 0.0 for d in provenance.depths}
    for m, (b, t) in enumerate(zip(*positions)):
        if labels.original[b, t]:
            continue
        head = int(provenance.dominant_head[m])
        # 替换词的损失 -log σ(-z) = softplus(z)
        loss = float(np.logaddexp(0.0, logits[b, t]))
        sums[head] += loss
        metrics.head_count[head] += 1
        metrics.token_losses.append((head, loss))
    for d in provenance.depths:
        if metrics.head_count[d]:
            metrics.head_loss[d] = sums[d] / metrics.head_count[d]
    return metrics
