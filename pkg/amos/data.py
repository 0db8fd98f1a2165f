"""
合成语料、词表、15% 掩码与确定性批处理
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from amos.errors import DataError

logger = logging.getLogger(__name__)

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
RESERVED = (PAD, MASK, UNK)

# 语料中的占位槽
SUBJECT_SLOT = "SUBJ"
VERB_SLOT = "VERB"
LABEL_NAMES = ("a", "b")


@dataclass(frozen=True)
class TemplateFamily:
    """句子模板：开头槽位 + 填充词 + 结尾槽位（结尾含与主语一致的动词）"""

    name: str
    opening: Tuple[str, ...]
    closing: Tuple[str, ...]
    weight: float = 1.0

    @property
    def min_length(self) -> int:
        return len(self.opening) + len(self.closing) + 1


DEFAULT_FAMILIES = (
    TemplateFamily("simple", (SUBJECT_SLOT,), (VERB_SLOT, ".")),
    TemplateFamily("relative", (SUBJECT_SLOT, "that"), (VERB_SLOT, "it", ".")),
    TemplateFamily("fronted", ("then", SUBJECT_SLOT), ("and", VERB_SLOT, ".")),
)

DEFAULT_WORD_CLASSES = ("det", "adj", "noun", "adv", "prep", "pron")


@dataclass(frozen=True)
class GrammarSpec:
    """
    带长程一致约束的合成文法：开头的主语类别（a/b）决定结尾动词的类别，
    中间的填充词由词类马尔可夫链生成
    """

    families: Tuple[TemplateFamily, ...] = DEFAULT_FAMILIES
    word_classes: Tuple[str, ...] = DEFAULT_WORD_CLASSES
    words_per_class: int = 6
    subjects_per_label: int = 4
    verbs_per_label: int = 3
    label_prior: float = 0.5
    min_length: int = 32
    max_length: int = 64
    seed: int = 7

    def validate(self) -> None:
        if not self.families:
            raise DataError("grammar needs at least one template family")
        if self.min_length > self.max_length:
            raise DataError(f"length range [{self.min_length}, {self.max_length}] is empty")
        for family in self.families:
            if family.min_length > self.min_length:
                raise DataError(
                    f"template {family.name!r} needs length >= {family.min_length}, "
                    f"but length range starts at {self.min_length}")
            if SUBJECT_SLOT not in family.opening or VERB_SLOT not in family.closing:
                raise DataError(f"template {family.name!r} lacks a subject/verb agreement pair")
        if not 0.0 < self.label_prior < 1.0:
            raise DataError(f"label_prior must lie in (0, 1), got {self.label_prior}")
        if min(self.words_per_class, self.subjects_per_label, self.verbs_per_label) < 1:
            raise DataError("every token class needs at least one surface token")


@lru_cache(maxsize=16)
def _transition_matrix(spec: GrammarSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    n = len(spec.word_classes)
    return rng.dirichlet(np.full(n, 0.3), size=n)


def generate_sequence(spec: GrammarSpec, index: int) -> List[str]:
    """第 index 条序列；随机性只取决于 (seed, index)"""
    rng = np.random.default_rng([spec.seed, 1, index])
    weights = np.array([f.weight for f in spec.families], dtype=np.float64)
    family = spec.families[rng.choice(len(spec.families), p=weights / weights.sum())]
    label = LABEL_NAMES[0] if rng.random() < spec.label_prior else LABEL_NAMES[1]
    length = int(rng.integers(spec.min_length, spec.max_length + 1))

    def fill_slots(slots: Sequence[str]) -> List[str]:
        out = []
        for slot in slots:
            if slot == SUBJECT_SLOT:
                out.append(f"s{label}{rng.integers(spec.subjects_per_label)}")
            elif slot == VERB_SLOT:
                out.append(f"v{label}{rng.integers(spec.verbs_per_label)}")
            else:
                out.append(slot)
        return out

    head = fill_slots(family.opening)
    tail = fill_slots(family.closing)
    transitions = _transition_matrix(spec)
    state = int(rng.integers(len(spec.word_classes)))
    filler = []
    for _ in range(length - len(head) - len(tail)):
        filler.append(f"{spec.word_classes[state]}{rng.integers(spec.words_per_class)}")
        state = int(rng.choice(len(spec.word_classes), p=transitions[state]))
    return head + filler + tail


def generate_synthetic_corpus(spec: GrammarSpec, count: int, path: os.PathLike,
                              workers: int = 4, progress: bool = False) -> Path:
    """写出 count 条序列，每行一条，空格分隔；按 (seed, 行号) 确定"""
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    spec.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunk = 256
    starts = list(range(0, count, chunk))

    def build(start: int) -> List[str]:
        return [" ".join(generate_sequence(spec, i)) for i in range(start, min(start + chunk, count))]

    # 线程池并行生成，map 保证输出顺序
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor, \
            open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lines in tqdm(executor.map(build, starts), total=len(starts),
                          desc="gen-data", disable=not progress):
            for line in lines:
                fh.write(line + "\n")
    logger.info("wrote %d sequences to %s", count, path)
    return path


def token_class(token: str) -> str:
    """表层词的词类：去掉结尾数字（sa3 -> sa，noun2 -> noun）"""
    stem = token.rstrip("0123456789")
    return stem or token


def agreement_label(tokens: Sequence[str]) -> int:
    """从第一个主语词恢复一致标签：a -> 0，b -> 1"""
    for token in tokens:
        cls = token_class(token)
        if len(cls) == 2 and cls[0] == "s" and cls[1] in LABEL_NAMES:
            return LABEL_NAMES.index(cls[1])
    raise DataError(f"sequence has no subject token: {' '.join(tokens[:8])} ...")


def previous_token_classes(tokens: Sequence[str]) -> List[str]:
    """位置 i (i >= 1) 的局部标签 = 第 i-1 个词的词类"""
    return [token_class(t) for t in tokens[:-1]]


def read_corpus(path: os.PathLike) -> List[List[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    return [line.split(" ") for line in lines if line]


# ---- 词表 ----

@dataclass
class Vocab:
    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:3]) != list(RESERVED):
            raise DataError("vocab must start with [PAD], [MASK], [UNK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocab contains duplicate tokens")
        if len(self.tokens) < 4:
            raise DataError("vocab needs at least one non-reserved token")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids if int(i) != PAD_ID]

    def save(self, path: os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: os.PathLike) -> "Vocab":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocab file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(corpus_path: os.PathLike) -> Vocab:
    """保留符号 + 语料中按首次出现顺序的所有词"""
    sequences = read_corpus(corpus_path)
    if not sequences:
        raise DataError(f"corpus is empty: {corpus_path}")
    seen = dict.fromkeys(RESERVED)
    for tokens in sequences:
        for token in tokens:
            seen.setdefault(token)
    return Vocab(list(seen))


# ---- 掩码 ----

@dataclass
class MaskedExample:
    original: np.ndarray
    masked: np.ndarray
    positions: np.ndarray


def masked_count(length: int, ratio: float) -> int:
    """ceil(ratio × length)，至少 1；减去 1e-9 以免 0.15*20 的浮点误差进位"""
    return max(1, math.ceil(ratio * length - 1e-9))


def apply_masking(seq: np.ndarray, ratio: float, rng: np.random.Generator,
                  pad_id: int = PAD_ID, mask_id: int = MASK_ID) -> MaskedExample:
    if not 0.0 < ratio < 1.0:
        raise DataError(f"mask ratio must lie in (0, 1), got {ratio}")
    seq = np.asarray(seq, dtype=np.int64)
    candidates = np.flatnonzero(seq != pad_id)
    if candidates.size == 0:
        raise DataError("cannot mask a sequence without non-PAD tokens")
    k = masked_count(candidates.size, ratio)
    positions = np.sort(rng.choice(candidates, size=k, replace=False))
    masked = seq.copy()
    masked[positions] = mask_id
    return MaskedExample(original=seq, masked=masked, positions=positions)


@dataclass
class MaskedBatch:
    """X^orig、X^mask 与掩码位置集合 M"""

    original: np.ndarray
    masked: np.ndarray
    mask: np.ndarray
    sequence_ids: np.ndarray = None

    @property
    def pad(self) -> np.ndarray:
        return self.original == PAD_ID

    @property
    def positions(self) -> Tuple[np.ndarray, np.ndarray]:
        """按行优先顺序排列的 (batch 下标, 位置下标)"""
        return np.nonzero(self.mask)

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def targets(self) -> np.ndarray:
        return self.original[self.mask]


def pad_to(ids: np.ndarray, seq_len: int, pad_id: int = PAD_ID) -> np.ndarray:
    out = np.full(seq_len, pad_id, dtype=np.int64)
    n = min(seq_len, len(ids))
    out[:n] = ids[:n]
    return out


def collate(examples: Sequence[MaskedExample], sequence_ids: Optional[np.ndarray] = None) -> MaskedBatch:
    original = np.stack([e.original for e in examples])
    masked = np.stack([e.masked for e in examples])
    mask = np.zeros(original.shape, dtype=bool)
    for row, example in enumerate(examples):
        mask[row, example.positions] = True
    return MaskedBatch(original=original, masked=masked, mask=mask, sequence_ids=sequence_ids)


class BatchStream:
    """
    确定性批流：第 step 步的批只取决于 (seed, step)。
    epoch 顺序是 (seed, epoch) 决定的置换，不足一批的余数丢弃
    """

    def __init__(self, sequences: Sequence[np.ndarray], batch_size: int, seq_len: int,
                 seed: int, mask_ratio: float = 0.15):
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        if seq_len < 8:
            raise DataError(f"seq_len must be >= 8, got {seq_len}")
        if len(sequences) < batch_size:
            raise DataError(f"corpus has {len(sequences)} sequences, fewer than one batch of {batch_size}")
        self.sequences = [pad_to(np.asarray(s, dtype=np.int64), seq_len) for s in sequences]
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.mask_ratio = mask_ratio
        self.batches_per_epoch = len(self.sequences) // batch_size

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 2, epoch]).permutation(len(self.sequences))

    def batch_at(self, step: int) -> MaskedBatch:
        epoch, offset = divmod(step, self.batches_per_epoch)
        order = self.epoch_order(epoch)
        ids = order[offset * self.batch_size:(offset + 1) * self.batch_size]
        examples = [
            apply_masking(self.sequences[i], self.mask_ratio,
                          np.random.default_rng([self.seed, 3, epoch, int(i)]))
            for i in ids
        ]
        return collate(examples, sequence_ids=ids)

    def iterate(self, start: int = 0, stop: Optional[int] = None) -> Iterator[MaskedBatch]:
        step = start
        while stop is None or step < stop:
            yield self.batch_at(step)
            step += 1

    def prefetch(self, start: int, stop: int, depth: int = 2) -> Iterator[MaskedBatch]:
        """后台线程提前构造批；批内容只由 step 决定，顺序不变"""
        with ThreadPoolExecutor(max_workers=1) as executor:
            pending = [executor.submit(self.batch_at, s) for s in range(start, min(start + depth, stop))]
            next_step = start + len(pending)
            while pending:
                batch = pending.pop(0).result()
                if next_step < stop:
                    pending.append(executor.submit(self.batch_at, next_step))
                    next_step += 1
                yield batch


def batch_iterator(sequences: Sequence[Sequence[str]], vocab: Vocab, batch_size: int,
                   seq_len: int, seed: int, mask_ratio: float = 0.15,
                   epochs: Optional[int] = None) -> Iterator[MaskedBatch]:
    """按 epoch 产出 MaskedBatch；epochs=None 时无限迭代"""
    stream = BatchStream([vocab.encode(s) for s in sequences], batch_size, seq_len, seed, mask_ratio)
    stop = None if epochs is None else epochs * stream.batches_per_epoch
    return stream.iterate(0, stop)
