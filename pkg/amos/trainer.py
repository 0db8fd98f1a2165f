"""
联合训练：total = L_GEN + λ·L_DISC，一次反向传播；
γ/v 路径上的梯度反转让 v 与生成器主干（经 γ）对 L_DISC 做上升
"""

from __future__ import annotations

import bisect
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import config as defaults
from amos.autodiff import ParameterSet, Tape, Tensor
from amos.checkpoint import read_checkpoint, write_checkpoint
from amos.data import BatchStream, MaskedBatch, Vocab, read_corpus
from amos.discriminator import (DiscOutput, RTDLabelSet, discriminator_loss,
                                init_discriminator_params, replaced_token_metrics)
from amos.encoder import SHARED_EMBEDDING, EncoderConfig, init_shared_embedding
from amos.errors import AmosError, CheckpointError, ConfigError, NumericalError
from amos.generator import (GeneratorConfig, GeneratorForwardResult, GeneratorLoss,
                            generator_forward, generator_mlm_loss, init_generator_params)
from amos.mixture import (MIXTURE_WEIGHT, GumbelSample, MixtureOutput, ReplacedBatch,
                          build_replaced_sequence, constant_weights, gumbel_softmax_sample,
                          mixed_distribution, mixture_weights, trace_provenance)
from amos.optim import Adam, clip_grad_norm
from amos.settings import (CurriculumMode, ModeSpec, TrainConfig, config_from_dict,
                           effective_depths, fingerprint, resolve_mode, to_json_dict, validate)
from error_logger import ErrorLogger

logger = logging.getLogger(__name__)

# 随机流编号：每一步的随机数只由 (seed, 流, step) 决定
STREAM_INIT = 11
STREAM_GUMBEL = 12
STREAM_DROPOUT = 13
STREAM_RANDOM_LAYER = 14

METRICS_FILE = "metrics.csv"
GAMMA_FILE = "gamma_trajectory.csv"
REPLACED_LOSSES_FILE = "replaced_losses.csv"
FINAL_CHECKPOINT = "final.npz"


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


# ---- 模型 ----

@dataclass
class AmosModel:
    params: ParameterSet
    generator: GeneratorConfig
    discriminator: EncoderConfig

    @property
    def depths(self) -> Tuple[int, ...]:
        return self.generator.depths

    @property
    def vocab_size(self) -> int:
        return self.discriminator.vocab_size


def _encoder_config(config: TrainConfig, num_layers: int, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(num_layers=num_layers, hidden_size=config.hidden_size,
                         num_attention_heads=config.num_attention_heads, ffn_size=config.ffn_size,
                         num_buckets=config.num_buckets,
                         max_relative_distance=config.max_relative_distance,
                         dropout_rate=config.dropout, vocab_size=vocab_size)


def build_model(config: TrainConfig, vocab_size: int, mode: Optional[ModeSpec] = None) -> AmosModel:
    """共享嵌入、生成器、判别器与混合向量 v 各用独立的初始化随机流"""
    mode = mode or resolve_mode(config)
    depths = effective_depths(config, mode)
    trunk = config.gen_layers or depths[-1]
    generator = GeneratorConfig(depths, _encoder_config(config, trunk, vocab_size),
                                stop_grad=config.stop_grad)
    discriminator = _encoder_config(config, config.disc_layers, vocab_size)
    try:
        generator.validate()
        discriminator.validate()
    except AmosError as exc:
        raise ConfigError(str(exc)) from None

    params = ParameterSet()
    init_shared_embedding(params, vocab_size, config.hidden_size, step_rng(config.seed, STREAM_INIT, 0))
    init_generator_params(params, generator, step_rng(config.seed, STREAM_INIT, 1))
    init_discriminator_params(params, discriminator, step_rng(config.seed, STREAM_INIT, 2))
    params.add(MIXTURE_WEIGHT, np.zeros(config.hidden_size), "mixture")
    logger.debug("built model with %d parameters (%d tensors), heads at %s",
                 params.num_elements(), len(params), depths)
    return AmosModel(params=params, generator=generator, discriminator=discriminator)


# ---- 联合损失 ----

@dataclass
class JointLoss:
    total: Tensor
    gen: GeneratorLoss
    disc: Tensor
    gamma: Tensor
    mixture: MixtureOutput
    sample: GumbelSample
    replaced: ReplacedBatch
    disc_output: DiscOutput
    generator: GeneratorForwardResult


def curriculum_weights(mode: ModeSpec, result: GeneratorForwardResult, params: ParameterSet,
                       config: TrainConfig, step: int) -> Tensor:
    """按课程模式给出 (M, K) 的 γ"""
    k = len(result.depths)
    num_positions = result.positions[0].shape[0]
    if mode.kind is CurriculumMode.LEARNED_MIXTURE:
        return mixture_weights(result, params[MIXTURE_WEIGHT])
    if mode.kind is CurriculumMode.UNIFORM_MIXTURE:
        return constant_weights(num_positions, np.full(k, 1.0 / k))
    if mode.kind is CurriculumMode.FIXED_MIXTURE:
        return constant_weights(num_positions, mode.weights)
    if mode.kind is CurriculumMode.SINGLE_HEAD:
        return constant_weights(num_positions, np.ones(1))
    if mode.kind is CurriculumMode.RANDOM_LAYER:
        picks = step_rng(config.seed, STREAM_RANDOM_LAYER, step).integers(k, size=num_positions)
        return constant_weights(num_positions, np.eye(k)[picks])
    # layer_switch：第 step 步所处的区间决定使用哪个头
    head = bisect.bisect_right(list(mode.switch_points), step / config.total_steps)
    return constant_weights(num_positions, np.eye(k)[min(head, k - 1)])


def joint_loss(batch: MaskedBatch, mode: ModeSpec, config: TrainConfig, model: AmosModel,
               step: int, train: bool = True) -> JointLoss:
    params = model.params
    shared = params[SHARED_EMBEDDING]
    result = generator_forward(batch, model.generator, params)
    gen = generator_mlm_loss(result, batch)

    gamma = curriculum_weights(mode, result, params, config, step)
    mixture = mixed_distribution(result, gamma, shared,
                                 config.adv_mlm_multiplier if config.adv_mlm else None)
    sample = gumbel_softmax_sample(mixture.log_pi, config.tau, step_rng(config.seed, STREAM_GUMBEL, step))
    provenance = trace_provenance(result, gamma, sample)
    replaced = build_replaced_sequence(batch, sample, shared, provenance, soft_input=config.soft_disc_input)

    dropout_rng = None
    if train and model.discriminator.dropout_rate > 0:
        dropout_rng = step_rng(config.seed, STREAM_DROPOUT, step)
    disc, output = discriminator_loss(replaced, model.discriminator, params, dropout_rng)
    total = gen.total + disc * config.lambda_
    return JointLoss(total=total, gen=gen, disc=disc, gamma=gamma, mixture=mixture, sample=sample,
                     replaced=replaced, disc_output=output, generator=result)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """线性预热到峰值，再线性衰减到 total_steps 处的 0"""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if config.warmup_steps and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    remaining = config.total_steps - step
    return config.peak_lr * max(0.0, remaining / (config.total_steps - config.warmup_steps))


# ---- 指标 ----

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class MetricsRecord:
    step: int
    l_gen: float
    l_gen_heads: Dict[int, float]
    l_disc: float
    rtd_acc_replaced: Optional[float]
    gamma_mean: Dict[int, float]
    disc_loss_heads: Dict[int, Optional[float]]
    n_replaced: int
    lr: float
    wall_ms: float
    skipped: bool = False
    token_losses: List[Tuple[int, float]] = field(default_factory=list, repr=False)

    @staticmethod
    def header(depths: Sequence[int]) -> List[str]:
        return (["step", "l_gen"] + [f"l_gen_head_{d}" for d in depths]
                + ["l_disc", "rtd_acc_replaced"] + [f"gamma_mean_{d}" for d in depths]
                + [f"disc_loss_head_{d}" for d in depths] + ["n_replaced", "lr", "wall_ms"])

    def to_row(self, depths: Sequence[int]) -> List[str]:
        return ([str(self.step), _fmt(self.l_gen)] + [_fmt(self.l_gen_heads.get(d)) for d in depths]
                + [_fmt(self.l_disc), _fmt(self.rtd_acc_replaced)]
                + [_fmt(self.gamma_mean.get(d)) for d in depths]
                + [_fmt(self.disc_loss_heads.get(d)) for d in depths]
                + [str(self.n_replaced), _fmt(self.lr), f"{self.wall_ms:.3f}"])

    def deterministic_row(self, depths: Sequence[int]) -> List[str]:
        """去掉 wall_ms 之后的行，用于逐位比较"""
        return self.to_row(depths)[:-1]

    @classmethod
    def skipped_step(cls, step: int, depths: Sequence[int], lr: float, wall_ms: float) -> "MetricsRecord":
        nan = float("nan")
        return cls(step=step, l_gen=nan, l_gen_heads={d: nan for d in depths}, l_disc=nan,
                   rtd_acc_replaced=None, gamma_mean={d: nan for d in depths},
                   disc_loss_heads={d: None for d in depths}, n_replaced=0, lr=lr,
                   wall_ms=wall_ms, skipped=True)


# ---- 训练状态与检查点 ----

@dataclass
class TrainState:
    config: TrainConfig
    mode: ModeSpec
    model: AmosModel
    optimizer: Adam
    step: int = 0
    nonfinite_streak: int = 0
    fingerprint: str = ""

    @property
    def frozen(self) -> List[str]:
        """只有 learned_mixture 训练 v"""
        return [] if self.mode.learns_mixture else [MIXTURE_WEIGHT]


def init_state(config: TrainConfig, vocab_size: int, mode: Optional[ModeSpec] = None) -> TrainState:
    mode = mode or resolve_mode(config)
    validate(config, mode)
    model = build_model(config, vocab_size, mode)
    optimizer = Adam(model.params, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    return TrainState(config=config, mode=mode, model=model, optimizer=optimizer,
                      fingerprint=fingerprint(config))


def save_checkpoint(state: TrainState, path) -> Path:
    arrays = {f"param.{name}": value for name, value in state.model.params.state_dict().items()}
    arrays.update(state.optimizer.state_dict())
    meta = {
        "step": state.step,
        "nonfinite_streak": state.nonfinite_streak,
        "fingerprint": state.fingerprint,
        "config": to_json_dict(state.config),
        "mode": str(state.mode),
        "mode_weights": list(state.mode.weights),
        "vocab_size": state.model.vocab_size,
        "param_digest": state.model.params.digest(),
    }
    return write_checkpoint(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    """完整读入并校验后才构造状态；任何一步失败都不返回部分状态"""
    arrays, meta = read_checkpoint(path)
    try:
        config = config_from_dict(meta["config"])
        mode = resolve_mode(replace(config, fixed_mixture_from="")) if not meta["mode_weights"] \
            else replace(ModeSpec.parse(meta["mode"]), weights=tuple(meta["mode_weights"]))
        state = init_state(config, int(meta["vocab_size"]), mode)
        params = {name[len("param."):]: value for name, value in arrays.items() if name.startswith("param.")}
        state.model.params.load_state_dict(params)
        state.optimizer.load_state_dict(arrays)
    except (KeyError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its metadata: {exc}") from None
    if state.model.params.digest() != meta["param_digest"]:
        raise CheckpointError(f"checkpoint {path} parameter digest mismatch")
    state.step = int(meta["step"])
    state.nonfinite_streak = int(meta["nonfinite_streak"])
    state.fingerprint = meta["fingerprint"]
    return state


# ---- 单步训练 ----

def train_step(batch: MaskedBatch, state: TrainState) -> MetricsRecord:
    """前向、一次反向、裁剪、Adam 更新；loss 非有限时跳过更新，连续 3 次则中止"""
    config = state.config
    params = state.model.params
    depths = state.model.depths
    step = state.step
    lr = lr_schedule(step, config)
    start = time.perf_counter()

    params.zero_grad()
    tape = Tape()
    loss: Optional[JointLoss] = None
    try:
        with tape:
            loss = joint_loss(batch, state.mode, config, state.model, step, train=True)
        finite = bool(np.isfinite(loss.total.item()))
    except NumericalError as exc:
        logger.warning("step %d: %s", step + 1, exc)
        finite = False

    if not finite:
        tape.clear()
        params.zero_grad()
        state.nonfinite_streak += 1
        state.step += 1
        logger.warning("non-finite loss at step %d, update skipped (%d in a row)",
                       state.step, state.nonfinite_streak)
        if state.nonfinite_streak >= defaults.MAX_NONFINITE_STEPS:
            raise NumericalError(f"{state.nonfinite_streak} consecutive non-finite losses, "
                                 f"aborting at step {state.step}")
        return MetricsRecord.skipped_step(state.step, depths, lr, (time.perf_counter() - start) * 1e3)

    tape.backward(loss.total)
    tape.clear()
    grad_norm = clip_grad_norm(params, config.clip_norm)
    state.optimizer.step(lr, frozen=state.frozen)
    state.nonfinite_streak = 0
    state.step += 1

    labels = RTDLabelSet.from_replaced(loss.replaced)
    metrics = replaced_token_metrics(loss.disc_output, labels, loss.replaced.provenance,
                                     loss.replaced.positions)
    gamma_mean = loss.gamma.data.mean(axis=0)
    record = MetricsRecord(
        step=state.step,
        l_gen=loss.gen.total.item(),
        l_gen_heads=dict(loss.gen.per_head),
        l_disc=loss.disc.item(),
        rtd_acc_replaced=metrics.accuracy,
        gamma_mean={d: float(gamma_mean[k]) for k, d in enumerate(depths)},
        disc_loss_heads={d: metrics.head_loss.get(d) for d in depths},
        n_replaced=metrics.replaced_count,
        lr=lr,
        wall_ms=(time.perf_counter() - start) * 1e3,
        token_losses=metrics.token_losses,
    )
    logger.debug("step %d: l_gen=%.4f l_disc=%.4f grad_norm=%.3f lr=%.2e",
                 record.step, record.l_gen, record.l_disc, grad_norm, lr)
    return record


# ---- 完整预训练 ----

class CsvLog:
    """追加写入的 CSV；续训时截掉检查点之后的行"""

    def __init__(self, path: Path, header: Sequence[str], keep_through: Optional[int] = None):
        self.path = Path(path)
        rows: List[List[str]] = []
        if keep_through is not None and self.path.exists():
            with open(self.path, newline="", encoding="utf-8") as fh:
                existing = list(csv.reader(fh))
            if existing and existing[0] == list(header):
                rows = [r for r in existing[1:] if r and int(r[0]) <= keep_through]
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)

    def write(self, row: Sequence) -> None:
        self._writer.writerow(row)

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: Path
    gamma_trajectory: Optional[Path]
    replaced_losses: Path
    steps: int
    records: int


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / defaults.CHECKPOINT_DIRNAME / f"step_{step:06d}.npz"


def run_pretraining(config: TrainConfig, out_dir, resume: Optional[str] = None,
                    stop_after: Optional[int] = None, progress: bool = False,
                    config_path: Optional[str] = None) -> PretrainResult:
    """
    训练 total_steps 步，按 log_interval 写指标、按 checkpoint_interval 写检查点；
    stop_after 用于在中途停下（之后可用 resume 续训）
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.load(config.vocab)
    sequences = [vocab.encode(s) for s in read_corpus(config.corpus)]

    if resume:
        state = load_checkpoint(resume)
        if state.fingerprint != fingerprint(config):
            raise CheckpointError(f"checkpoint {resume} was written with a different config "
                                  f"(fingerprint {state.fingerprint[:12]} vs {fingerprint(config)[:12]})")
        if state.model.vocab_size != len(vocab):
            raise CheckpointError(f"checkpoint vocab size {state.model.vocab_size} != {len(vocab)}")
        logger.info("resuming from %s at step %d", resume, state.step)
    else:
        state = init_state(config, len(vocab))

    stream = BatchStream(sequences, config.batch_size, config.seq_len, config.seed, config.mask_ratio)
    stop = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    depths = state.model.depths
    keep = state.step if resume else None
    learned = state.mode.learns_mixture

    metrics_log = CsvLog(out / METRICS_FILE, MetricsRecord.header(depths), keep)
    losses_log = CsvLog(out / REPLACED_LOSSES_FILE, ["step", "head", "loss"], keep)
    gamma_log = CsvLog(out / GAMMA_FILE, ["step"] + [f"gamma_d{d}" for d in depths], keep) if learned else None
    logs = [log for log in (metrics_log, losses_log, gamma_log) if log is not None]

    records = 0
    started = time.perf_counter()
    logger.info("pretraining %s for steps %d..%d (%d heads at %s)",
                state.mode, state.step, stop, len(depths), depths)
    try:
        bar = tqdm(stream.prefetch(state.step, stop), total=stop - state.step, initial=0,
                   desc="pretrain", unit="step", disable=not progress)
        for batch in bar:
            record = train_step(batch, state)
            if record.step % config.log_interval == 0:
                metrics_log.write(record.to_row(depths))
                for head, value in record.token_losses:
                    losses_log.write([record.step, head, repr(value)])
                if gamma_log is not None:
                    gamma_log.write([record.step] + [_fmt(record.gamma_mean[d]) for d in depths])
                for log in logs:
                    log.flush()
                records += 1
                bar.set_postfix(l_gen=f"{record.l_gen:.3f}", l_disc=f"{record.l_disc:.3f}")
            if record.step % config.checkpoint_interval == 0 and record.step < stop:
                save_checkpoint(state, checkpoint_path(out, record.step))
    except Exception as exc:
        report = ErrorLogger.create_error_log(
            error=exc, stage="pretrain", run_params=to_json_dict(config), step=state.step,
            config_path=config_path, elapsed_time=time.perf_counter() - started)
        report_path = ErrorLogger.save_to_file(report, str(out / "logs"))
        logger.error("pretraining failed at step %d, report written to %s", state.step, report_path)
        raise
    finally:
        for log in logs:
            log.close()

    final = out / defaults.CHECKPOINT_DIRNAME / FINAL_CHECKPOINT if stop == config.total_steps \
        else checkpoint_path(out, stop)
    save_checkpoint(state, final)
    logger.info("pretraining reached step %d in %.1fs, checkpoint %s",
                state.step, time.perf_counter() - started, final)
    return PretrainResult(checkpoint=final, metrics=out / METRICS_FILE,
                          gamma_trajectory=out / GAMMA_FILE if learned else None,
                          replaced_losses=out / REPLACED_LOSSES_FILE, steps=state.step, records=records)
