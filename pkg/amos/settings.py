"""
训练配置：TrainConfig、课程模式解析、严格 JSON 读取、快照与指纹
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import config as defaults
from amos.errors import ConfigError

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "resolved_config.json"

# 不影响训练轨迹的字段，不计入指纹
_FINGERPRINT_EXCLUDED = ("log_interval", "checkpoint_interval", "probe_steps", "probe_lr", "probe_sequences")


class CurriculumMode(Enum):
    """课程模式"""
    LEARNED_MIXTURE = "learned_mixture"
    UNIFORM_MIXTURE = "uniform_mixture"
    RANDOM_LAYER = "random_layer"
    LAYER_SWITCH = "layer_switch"
    SINGLE_HEAD = "single_head"
    FIXED_MIXTURE = "fixed_mixture"


@dataclass(frozen=True)
class ModeSpec:
    kind: CurriculumMode
    head: Optional[int] = None
    switch_points: Tuple[float, ...] = ()
    weights: Tuple[float, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "ModeSpec":
        """learned_mixture | uniform_mixture | random_layer | layer_switch[:f1,f2] | single_head:d | fixed_mixture[:w1,...]"""
        name, _, arg = text.strip().partition(":")
        try:
            kind = CurriculumMode(name)
        except ValueError:
            raise ConfigError(f"unknown curriculum mode {name!r}") from None
        try:
            numbers = tuple(float(x) for x in arg.split(",")) if arg else ()
        except ValueError:
            raise ConfigError(f"invalid mode argument in {text!r}") from None
        if kind is CurriculumMode.SINGLE_HEAD:
            if len(numbers) != 1 or numbers[0] != int(numbers[0]):
                raise ConfigError(f"single_head needs one integer depth, got {text!r}")
            return cls(kind, head=int(numbers[0]))
        if kind is CurriculumMode.LAYER_SWITCH:
            return cls(kind, switch_points=numbers)
        if kind is CurriculumMode.FIXED_MIXTURE:
            return cls(kind, weights=numbers)
        if numbers:
            raise ConfigError(f"mode {name!r} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind is CurriculumMode.SINGLE_HEAD:
            return f"single_head:{self.head}"
        return self.kind.value

    @property
    def learns_mixture(self) -> bool:
        return self.kind is CurriculumMode.LEARNED_MIXTURE


@dataclass
class TrainConfig:
    # 数据
    corpus: str = defaults.CORPUS_PATH
    vocab: str = defaults.VOCAB_PATH
    corpus_size: int = defaults.CORPUS_SIZE
    min_length: int = defaults.MIN_LENGTH
    max_length: int = defaults.MAX_LENGTH
    label_prior: float = defaults.LABEL_PRIOR
    data_seed: int = defaults.DATA_SEED
    # 模型
    hidden_size: int = defaults.HIDDEN_SIZE
    num_attention_heads: int = defaults.NUM_ATTENTION_HEADS
    ffn_size: int = defaults.FFN_SIZE
    disc_layers: int = defaults.DISC_LAYERS
    gen_layers: int = 0  # 0 表示与最深的头相同
    num_buckets: int = defaults.NUM_BUCKETS
    max_relative_distance: int = defaults.MAX_RELATIVE_DISTANCE
    dropout: float = defaults.DROPOUT
    # 目标
    lambda_: float = defaults.DISC_LOSS_WEIGHT
    tau: float = defaults.GUMBEL_TAU
    mask_ratio: float = defaults.MASK_RATIO
    head_depths: List[int] = field(default_factory=lambda: list(defaults.HEAD_DEPTHS))
    mode: str = CurriculumMode.LEARNED_MIXTURE.value
    switch_points: List[float] = field(default_factory=lambda: list(defaults.LAYER_SWITCH_POINTS))
    fixed_weights: List[float] = field(default_factory=list)
    fixed_mixture_from: str = ""
    adv_mlm: bool = False
    adv_mlm_multiplier: float = defaults.ADV_MLM_MULTIPLIER
    soft_disc_input: bool = False
    stop_grad: bool = defaults.STOP_GRAD
    # 优化
    total_steps: int = defaults.TOTAL_STEPS
    warmup_steps: int = defaults.WARMUP_STEPS
    peak_lr: float = defaults.PEAK_LR
    adam_eps: float = defaults.ADAM_EPS
    adam_beta1: float = defaults.ADAM_BETAS[0]
    adam_beta2: float = defaults.ADAM_BETAS[1]
    clip_norm: float = defaults.CLIP_NORM
    batch_size: int = defaults.BATCH_SIZE
    seq_len: int = defaults.SEQ_LEN
    seed: int = 42
    # 记录
    log_interval: int = defaults.LOG_INTERVAL
    checkpoint_interval: int = defaults.CHECKPOINT_INTERVAL
    # 探针
    probe_steps: int = defaults.PROBE_STEPS
    probe_lr: float = defaults.PROBE_LR
    probe_sequences: int = defaults.PROBE_SEQUENCES

    @property
    def trunk_layers(self) -> int:
        return self.gen_layers or max(self.head_depths)


def json_key(name: str) -> str:
    """dataclass 字段名 -> JSON 键（lambda_ -> lambda）"""
    return name.rstrip("_")


_FIELD_BY_KEY = {json_key(f.name): f.name for f in fields(TrainConfig)}


def _coerce(key: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif origin in (list, List):
        (item_hint,) = typing.get_args(hint)
        ok = isinstance(value, list)
        if ok:
            value = [_coerce(key, item, item_hint) for item in value]
    else:
        ok = False
    if not ok:
        raise ConfigError(f"config key {key!r} has wrong type: {value!r}")
    return value


def config_from_dict(raw: Mapping[str, Any]) -> TrainConfig:
    hints = typing.get_type_hints(TrainConfig)
    values = {}
    for key, value in raw.items():
        if key not in _FIELD_BY_KEY:
            raise ConfigError(f"unknown config key {key!r}")
        name = _FIELD_BY_KEY[key]
        values[name] = _coerce(key, value, hints[name])
    return normalize_mode(TrainConfig(**values))


def normalize_mode(config: TrainConfig) -> TrainConfig:
    """把 layer_switch:f1,f2 / fixed_mixture:w... 中的参数移入对应字段"""
    spec = ModeSpec.parse(config.mode)
    if spec.kind is CurriculumMode.LAYER_SWITCH and spec.switch_points:
        config = replace(config, switch_points=list(spec.switch_points))
    if spec.kind is CurriculumMode.FIXED_MIXTURE and spec.weights:
        config = replace(config, fixed_weights=list(spec.weights))
    return replace(config, mode=str(spec))


def to_json_dict(config: TrainConfig) -> Dict[str, Any]:
    return {json_key(k): v for k, v in asdict(config).items()}


def load_gamma_tail(path: str) -> List[float]:
    """γ 轨迹文件的最后一行（fixed_mixture 模式使用）"""
    if not os.path.exists(path):
        raise ConfigError(f"fixed_mixture_from file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"gamma trajectory {path} has no rows")
    return [float(x) for x in rows[-1][1:]]


def resolve_mode(config: TrainConfig) -> ModeSpec:
    spec = ModeSpec.parse(config.mode)
    if spec.kind is CurriculumMode.LAYER_SWITCH:
        return replace(spec, switch_points=tuple(config.switch_points))
    if spec.kind is CurriculumMode.FIXED_MIXTURE:
        weights = config.fixed_weights or (load_gamma_tail(config.fixed_mixture_from)
                                           if config.fixed_mixture_from else [])
        return replace(spec, weights=tuple(weights))
    return spec


def effective_depths(config: TrainConfig, mode: ModeSpec) -> Tuple[int, ...]:
    """single_head(d) 退化为深度 d 的单头生成器"""
    if mode.kind is CurriculumMode.SINGLE_HEAD:
        return (mode.head,)
    return tuple(config.head_depths)


def validate(config: TrainConfig, mode: Optional[ModeSpec] = None) -> None:
    def require(condition: bool, message: str) -> None:
        if not condition:
            raise ConfigError(message)

    require(config.lambda_ > 0, f"lambda must be > 0, got {config.lambda_}")
    require(config.tau > 0, f"tau must be > 0, got {config.tau}")
    require(0 < config.mask_ratio < 1, f"mask_ratio must lie in (0, 1), got {config.mask_ratio}")
    require(0 <= config.warmup_steps < config.total_steps,
            f"warmup_steps ({config.warmup_steps}) must be < total_steps ({config.total_steps})")
    points = config.switch_points
    require(all(0 < p < 1 for p in points) and all(b > a for a, b in zip(points, points[1:])),
            f"switch_points must be strictly increasing fractions in (0, 1), got {points}")
    depths = config.head_depths
    require(bool(depths) and depths[0] >= 1 and all(b > a for a, b in zip(depths, depths[1:])),
            f"head_depths must be strictly increasing positive layers, got {depths}")
    require(config.gen_layers == 0 or config.gen_layers >= depths[-1],
            f"gen_layers ({config.gen_layers}) must cover the deepest head ({depths[-1]})")
    require(config.hidden_size % config.num_attention_heads == 0,
            "hidden_size must be divisible by num_attention_heads")
    require(0 <= config.dropout < 1, f"dropout must lie in [0, 1), got {config.dropout}")
    require(config.batch_size >= 1 and config.seq_len >= 8, "batch_size >= 1 and seq_len >= 8 required")
    require(config.clip_norm > 0 and config.peak_lr > 0 and config.adam_eps > 0,
            "clip_norm, peak_lr and adam_eps must be > 0")
    require(0 <= config.adam_beta1 < 1 and 0 <= config.adam_beta2 < 1, "adam betas must lie in [0, 1)")
    require(config.adv_mlm_multiplier > 0, "adv_mlm_multiplier must be > 0")
    require(config.log_interval >= 1 and config.checkpoint_interval >= 1, "intervals must be >= 1")

    mode = mode or resolve_mode(config)
    k = len(depths)
    if mode.kind is CurriculumMode.SINGLE_HEAD:
        require(mode.head in depths, f"single_head:{mode.head} is not one of head_depths {depths}")
    elif mode.kind is CurriculumMode.LAYER_SWITCH:
        require(len(mode.switch_points) == k - 1,
                f"layer_switch needs {k - 1} switch points for {k} heads, got {list(mode.switch_points)}")
        require(all(0 < p < 1 for p in mode.switch_points)
                and all(b > a for a, b in zip(mode.switch_points, mode.switch_points[1:])),
                f"switch points must be strictly increasing fractions in (0, 1), got {list(mode.switch_points)}")
    elif mode.kind is CurriculumMode.FIXED_MIXTURE:
        weights = mode.weights
        require(len(weights) == k, f"fixed_mixture needs {k} weights, got {list(weights)}")
        require(all(w >= 0 for w in weights) and abs(sum(weights) - 1.0) <= 1e-6,
                f"fixed_mixture weights must be a distribution, got {list(weights)}")


def resolve_config(path: Optional[os.PathLike], overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """读取 JSON 配置，补全默认值，应用命令行覆盖（覆盖优先）并校验"""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    merged = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    config = config_from_dict(merged)
    validate(config)
    return config


def write_snapshot(config: TrainConfig, out_dir: os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SNAPSHOT_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def fingerprint(config: TrainConfig) -> str:
    payload = {k: v for k, v in to_json_dict(config).items() if k not in _FINGERPRINT_EXCLUDED}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
