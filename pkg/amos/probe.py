"""
冻结特征上的线性探针：生成器各头 / 主干各层 / 判别器各层，
局部任务（前一个词的词类）与全局任务（长距离一致标签）
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from amos import autodiff as ad
from amos.autodiff import ParameterSet, Tape
from amos.data import (PAD_ID, Vocab, agreement_label, pad_to, previous_token_classes, read_corpus)
from amos.discriminator import PREFIX as DISC_PREFIX
from amos.encoder import SHARED_EMBEDDING, embed, encode, projection_head
from amos.errors import ProbeError
from amos.generator import HEAD_PREFIX, PREFIX as GEN_PREFIX
from amos.optim import Adam
from amos.trainer import AmosModel, init_state, load_checkpoint

logger = logging.getLogger(__name__)

REPORT_HEADER = ["task", "source", "test_acc", "train_acc", "majority_baseline", "randinit_baseline"]
EXTRACT_CHUNK = 64


class ProbeTarget(Enum):
    PREVIOUS_TOKEN_CLASS = "previous_token_class"  # 逐词
    AGREEMENT = "agreement"  # 逐序列

    @property
    def per_token(self) -> bool:
        return self is ProbeTarget.PREVIOUS_TOKEN_CLASS


@dataclass(frozen=True)
class FeatureSource:
    """generator:<d> | generator_trunk:<l> | discriminator:<l>"""

    component: str
    index: int

    COMPONENTS = ("generator", "generator_trunk", "discriminator")

    @classmethod
    def parse(cls, text: str) -> "FeatureSource":
        component, _, index = text.partition(":")
        if component not in cls.COMPONENTS or not index.isdigit():
            raise ProbeError(f"invalid feature source {text!r}")
        return cls(component, int(index))

    def __str__(self) -> str:
        return f"{self.component}:{self.index}"

    def validate(self, model: AmosModel) -> None:
        if self.component == "generator":
            ok = self.index in model.depths
        elif self.component == "generator_trunk":
            ok = 0 <= self.index <= model.generator.trunk_depth
        else:
            ok = 0 <= self.index <= model.discriminator.num_layers
        if not ok:
            raise ProbeError(f"feature source {self} is not available in this model")


@dataclass(frozen=True)
class ProbeTask:
    name: str
    target: ProbeTarget
    source: FeatureSource


@dataclass
class ProbeConfig:
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0
    train_fraction: float = 0.8


@dataclass
class ProbeReport:
    task: str
    source: str
    test_acc: float
    train_acc: float
    majority_baseline: float
    randinit_baseline: Optional[float] = None

    def to_row(self) -> List[str]:
        randinit = "" if self.randinit_baseline is None else f"{self.randinit_baseline:.6f}"
        return [self.task, self.source, f"{self.test_acc:.6f}", f"{self.train_acc:.6f}",
                f"{self.majority_baseline:.6f}", randinit]


# ---- 特征 ----

def _source_states(ids: np.ndarray, model: AmosModel, source: FeatureSource) -> np.ndarray:
    params = model.params
    pad = ids == PAD_ID
    inputs = embed(ids, params[SHARED_EMBEDDING])
    if source.component == "discriminator":
        states = encode(inputs, model.discriminator, params, DISC_PREFIX, pad_mask=pad,
                        num_layers=max(source.index, 1))
        return states[source.index].data
    gen = model.generator
    states = encode(inputs, gen.encoder, params, GEN_PREFIX, pad_mask=pad,
                    num_layers=max(source.index, 1))
    if source.component == "generator_trunk":
        return states[source.index].data
    return projection_head(states[source.index], params, HEAD_PREFIX).data


def extract_features(model: AmosModel, sequences: Sequence[np.ndarray], source: FeatureSource,
                     seq_len: int, per_token: bool) -> Tuple[np.ndarray, np.ndarray]:
    """
    不开 Tape、不开 dropout 的确定性前向。
    per_token：位置 1..L-1 的特征逐行展开；否则对非 PAD 位置做平均池化。
    返回 (特征, 每行所属序列的编号)
    """
    source.validate(model)
    rows, groups = [], []
    for start in range(0, len(sequences), EXTRACT_CHUNK):
        chunk = sequences[start:start + EXTRACT_CHUNK]
        ids = np.stack([pad_to(np.asarray(s, dtype=np.int64), seq_len) for s in chunk])
        hidden = _source_states(ids, model, source)
        valid = ids != PAD_ID
        for row, seq_index in enumerate(range(start, start + len(chunk))):
            length = int(valid[row].sum())
            if per_token:
                rows.append(hidden[row, 1:length])
                groups.append(np.full(max(length - 1, 0), seq_index))
            else:
                rows.append(hidden[row, :length].mean(axis=0, keepdims=True))
                groups.append(np.array([seq_index]))
    return np.concatenate(rows), np.concatenate(groups)


def probe_labels(token_sequences: Sequence[Sequence[str]], target: ProbeTarget,
                 seq_len: int) -> Tuple[np.ndarray, List[str]]:
    """标签只由表层序列推出；返回 (整数标签, 类名表)"""
    if target.per_token:
        raw = [c for tokens in token_sequences for c in previous_token_classes(list(tokens)[:seq_len])]
    else:
        raw = [str(agreement_label(tokens)) for tokens in token_sequences]
    classes = sorted(set(raw))
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[c] for c in raw], dtype=np.int64), classes


# ---- 线性探针 ----

def _split(groups: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """按序列划分，训练集与测试集不共享任何序列"""
    unique = np.unique(groups)
    order = np.random.default_rng([seed, 21]).permutation(unique)
    cut = max(1, min(len(order) - 1, int(round(fraction * len(order)))))
    train_ids = np.isin(groups, order[:cut])
    return np.nonzero(train_ids)[0], np.nonzero(~train_ids)[0]


def train_linear_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig,
                       groups: Optional[np.ndarray] = None, task: str = "", source: str = "",
                       progress: bool = False) -> ProbeReport:
    """多分类逻辑回归，Adam 全批训练；特征按训练集统计量标准化"""
    if features.shape[0] != labels.shape[0]:
        raise ProbeError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
    groups = np.arange(len(labels)) if groups is None else groups
    if np.unique(groups).size < 2:
        raise ProbeError("probe needs at least two sequences to split")
    train, test = _split(groups, config.train_fraction, config.seed)
    classes = np.unique(labels[train])
    if classes.size < 2:
        raise ProbeError(f"probe {task or 'task'} has a single class in its training split")

    mean = features[train].mean(axis=0)
    std = features[train].std(axis=0) + 1e-8
    x = (features - mean) / std
    num_classes = int(labels.max()) + 1

    params = ParameterSet()
    rng = np.random.default_rng([config.seed, 22])
    w = params.add("probe.w", rng.normal(0.0, 0.01, size=(x.shape[1], num_classes)), "probe")
    b = params.add("probe.b", np.zeros(num_classes), "probe")
    optimizer = Adam(params)
    x_train = ad.constant(x[train])
    for _ in tqdm(range(config.steps), desc=f"probe {task} {source}".strip(), disable=not progress):
        params.zero_grad()
        with Tape() as tape:
            loss = ad.cross_entropy(x_train @ w + b, labels[train]).mean()
        tape.backward(loss)
        tape.clear()
        optimizer.step(config.lr)

    predictions = np.argmax(x @ w.data + b.data, axis=-1)
    majority = np.bincount(labels[train], minlength=num_classes).argmax()
    report = ProbeReport(task=task, source=source,
                         test_acc=float((predictions[test] == labels[test]).mean()),
                         train_acc=float((predictions[train] == labels[train]).mean()),
                         majority_baseline=float((labels[test] == majority).mean()))
    logger.info("probe %s on %s: test %.4f train %.4f majority %.4f",
                task, source, report.test_acc, report.train_acc, report.majority_baseline)
    return report


# ---- 探针套件 ----

def default_sources(model: AmosModel) -> List[FeatureSource]:
    return ([FeatureSource("generator", d) for d in model.depths]
            + [FeatureSource("discriminator", model.discriminator.num_layers)])


def run_probe_suite(checkpoint: os.PathLike, corpus: os.PathLike, vocab: os.PathLike,
                    targets: Sequence[ProbeTarget] = tuple(ProbeTarget),
                    sources: Optional[Sequence[FeatureSource]] = None,
                    out_path: Optional[os.PathLike] = None, workers: int = 1,
                    progress: bool = False) -> List[ProbeReport]:
    """
    每个 任务 × 特征源 训练两支探针：训练后的检查点与同配置同种子的随机初始化模型，
    后者的测试准确率作为 randinit 基线
    """
    state = load_checkpoint(checkpoint)
    config = state.config
    model = state.model
    digest = model.params.digest()
    baseline_model = init_state(config, model.vocab_size, state.mode).model

    vocabulary = Vocab.load(vocab)
    if len(vocabulary) != model.vocab_size:
        raise ProbeError(f"vocab has {len(vocabulary)} tokens, checkpoint expects {model.vocab_size}")
    token_sequences = read_corpus(corpus)[:config.probe_sequences]
    encoded = [vocabulary.encode(tokens) for tokens in token_sequences]
    sources = list(sources) if sources is not None else default_sources(model)
    probe_config = ProbeConfig(steps=config.probe_steps, lr=config.probe_lr, seed=config.seed)
    tasks = [ProbeTask(f"{t.value}", t, s) for t in targets for s in sources]

    def run(task: ProbeTask) -> ProbeReport:
        labels, _ = probe_labels(token_sequences, task.target, config.seq_len)
        per_token = task.target.per_token
        features, groups = extract_features(model, encoded, task.source, config.seq_len, per_token)
        report = train_linear_probe(features, labels, probe_config, groups, task.name, str(task.source))
        random_features, _ = extract_features(baseline_model, encoded, task.source, config.seq_len, per_token)
        baseline = train_linear_probe(random_features, labels, probe_config, groups,
                                      task.name, f"{task.source} (random init)")
        report.randinit_baseline = baseline.test_acc
        return report

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        reports = list(tqdm(executor.map(run, tasks), total=len(tasks), desc="probes",
                            disable=not progress))

    if model.params.digest() != digest:
        raise ProbeError("probing modified checkpoint parameters")
    if out_path is not None:
        write_probe_report(reports, out_path)
    return reports


def write_probe_report(reports: Sequence[ProbeReport], path: os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerow(report.to_row())
    return path


def best_sources(reports: Sequence[ProbeReport]) -> Dict[str, str]:
    """每个任务测试准确率最高的特征源"""
    best: Dict[str, ProbeReport] = {}
    for report in reports:
        if report.task not in best or report.test_acc > best[report.task].test_acc:
            best[report.task] = report
    return {task: report.source for task, report in best.items()}
