"""
整模型梯度校验：极小配置上对完整联合损失做中心差分
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from amos.autodiff import GradientReport, check_gradient
from amos.data import MASK_ID, MaskedBatch
from amos.settings import TrainConfig, resolve_mode, validate
from amos.trainer import build_model, joint_loss

logger = logging.getLogger(__name__)

TINY_VOCAB = 12
TINY_SEQ_LEN = 6
DEFAULT_EPSILON = 1e-5
TOLERANCE = 1e-4


def tiny_config(base: Optional[TrainConfig] = None) -> TrainConfig:
    """保留目标相关设置（λ、τ、模式与开关），尺寸缩到极小"""
    base = base or TrainConfig()
    return replace(base, hidden_size=8, num_attention_heads=2, ffn_size=16, disc_layers=2,
                   gen_layers=0, head_depths=[1, 2], num_buckets=4, max_relative_distance=8,
                   batch_size=2, seq_len=TINY_SEQ_LEN, mask_ratio=0.5, total_steps=10,
                   warmup_steps=0, switch_points=[0.5], fixed_weights=[0.5, 0.5],
                   fixed_mixture_from="")


def tiny_batch(seed: int = 0) -> MaskedBatch:
    """两条序列，第二条末尾一个 PAD；每条掩掉 3 个位置"""
    rng = np.random.default_rng([seed, 31])
    original = rng.integers(3, TINY_VOCAB, size=(2, TINY_SEQ_LEN))
    original[1, -1] = 0
    mask = np.zeros_like(original, dtype=bool)
    mask[0, [0, 2, 5]] = True
    mask[1, [1, 3, 4]] = True
    masked = np.where(mask, MASK_ID, original)
    return MaskedBatch(original=original, masked=masked, mask=mask, sequence_ids=np.arange(2))


@dataclass
class GradientSuiteResult:
    report: GradientReport
    group_errors: Dict[str, float]
    seconds: float

    @property
    def max_error(self) -> float:
        return self.report.max_error

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.report.passed(tolerance)


def run_gradient_suite(base: Optional[TrainConfig] = None, epsilon: float = DEFAULT_EPSILON,
                       max_elements: Optional[int] = None, seed: int = 0) -> GradientSuiteResult:
    config = tiny_config(base)
    mode = resolve_mode(config)
    validate(config, mode)
    model = build_model(config, TINY_VOCAB, mode)
    batch = tiny_batch(seed)

    start = time.perf_counter()
    report = check_gradient(lambda: joint_loss(batch, mode, config, model, step=0).total,
                            model.params, epsilon=epsilon, max_elements=max_elements, seed=seed)
    group_errors: Dict[str, float] = {}
    for name, error in report.errors.items():
        owner = model.params.owner(name)
        group_errors[owner] = max(group_errors.get(owner, 0.0), error)
    seconds = time.perf_counter() - start
    logger.info("gradient check (%s): max relative error %.3e over %d evaluations in %.1fs",
                mode, report.max_error, report.evaluations, seconds)
    return GradientSuiteResult(report=report, group_errors=group_errors, seconds=seconds)
