"""
多层 MLM 生成器：一条深度 d_K 的主干，在 D 中每一层接同一个 MLM 头，
各层之后 stop_gradient 把主干切成 K 个独立训练的块（stop_grad=False 时不截断）
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from amos import autodiff as ad
from amos.autodiff import ParameterSet, Tensor
from amos.data import MaskedBatch
from amos.encoder import (SHARED_EMBEDDING, EncoderConfig, LayerStates, embed, encode,
                          init_encoder_params, init_projection_head, mlm_logits, projection_head)
from amos.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

PREFIX = "gen"
HEAD_PREFIX = "gen.head"


@dataclass(frozen=True)
class GeneratorConfig:
    depths: Tuple[int, ...]
    encoder: EncoderConfig
    stop_grad: bool = True

    def __post_init__(self):
        # 生成器始终关闭 dropout
        object.__setattr__(self, "encoder", self.encoder.without_dropout())
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))

    @property
    def trunk_depth(self) -> int:
        return self.depths[-1]

    @property
    def num_heads(self) -> int:
        return len(self.depths)

    def validate(self) -> None:
        self.encoder.validate()
        if not self.depths:
            raise ShapeError("generator needs at least one MLM head depth")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])) or self.depths[0] < 1:
            raise ShapeError(f"head depths must be strictly increasing positive layers, got {self.depths}")
        if self.trunk_depth > self.encoder.num_layers:
            raise ShapeError(f"deepest head {self.trunk_depth} exceeds trunk of {self.encoder.num_layers} layers")


@dataclass
class GeneratorForwardResult:
    """f^(d)：第 d 层输出（投影头之前）；h^(d)：投影头之后；logits 只在掩码位置"""

    depths: Tuple[int, ...]
    trunk: LayerStates
    positions: Tuple[np.ndarray, np.ndarray]
    f: Dict[int, Tensor] = field(default_factory=dict)
    h: Dict[int, Tensor] = field(default_factory=dict)
    logits: Dict[int, Tensor] = field(default_factory=dict)


@dataclass
class GeneratorLoss:
    total: Tensor
    per_head: Dict[int, float]
    per_head_tensors: Dict[int, Tensor]


def init_generator_params(params: ParameterSet, config: GeneratorConfig, rng: np.random.Generator) -> None:
    config.validate()
    init_encoder_params(params, PREFIX, config.encoder, "gen", rng)
    init_projection_head(params, HEAD_PREFIX, config.encoder.hidden_size, "gen", rng)


def generator_forward(batch: MaskedBatch, config: GeneratorConfig, params: ParameterSet) -> GeneratorForwardResult:
    shared = params[SHARED_EMBEDDING]
    states = encode(embed(batch.masked, shared), config.encoder, params, PREFIX,
                    pad_mask=batch.pad, num_layers=config.trunk_depth,
                    detach_after=config.depths if config.stop_grad else ())
    positions = batch.positions
    result = GeneratorForwardResult(depths=config.depths, trunk=states, positions=positions)
    for d in config.depths:
        f = states[d][positions]
        h = projection_head(f, params, HEAD_PREFIX)
        result.f[d] = f
        result.h[d] = h
        result.logits[d] = mlm_logits(h, shared)
    return result


def generator_mlm_loss(result: GeneratorForwardResult, batch: MaskedBatch) -> GeneratorLoss:
    """L_GEN = 掩码位置上的平均值（对 K 个头的负对数似然求和）"""
    if batch.num_masked == 0:
        raise DataError("batch has no masked positions")
    targets = batch.targets
    per_head_tensors = {d: ad.cross_entropy(result.logits[d], targets).mean() for d in result.depths}
    total = None
    for d in result.depths:
        total = per_head_tensors[d] if total is None else total + per_head_tensors[d]
    return GeneratorLoss(total=total,
                         per_head={d: t.item() for d, t in per_head_tensors.items()},
                         per_head_tensors=per_head_tensors)
