"""Synthetic parallel corpora, their TSV form, and padded batching.

Three tasks: copy, reverse, and synonym-noise. In synonym-noise every
source token owns `fanout` valid target synonyms, so one source sentence
has many correct targets, and a fraction `noise` of target tokens is
replaced by a random vocabulary token.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NUM_RESERVED = 4
RESERVED_TOKENS = {"PAD": PAD, "BOS": BOS, "EOS": EOS, "UNK": UNK}

# RNG stream ids derived from the task seed
_SYNONYM_STREAM = 7919
SPLIT_STREAMS = {"train": 0, "dev": 1, "test": 2}

Sentence = Tuple[int, ...]
Pair = Tuple[Sentence, Sentence]


class TaskKind(str, Enum):
    COPY = "copy"
    REVERSE = "reverse"
    SYNONYM_NOISE = "synonym_noise"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.COPY
    src_vocab: int = 32
    tgt_vocab: int = 32
    min_len: int = 3
    max_len: int = 8
    fanout: int = 2
    noise: float = 0.0
    size: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        for name in ("src_vocab", "tgt_vocab"):
            if getattr(self, name) <= NUM_RESERVED:
                raise ConfigError(f"{name} must exceed the {NUM_RESERVED} reserved ids")
        if self.kind in (TaskKind.COPY, TaskKind.REVERSE) and self.src_vocab != self.tgt_vocab:
            raise ConfigError(f"{self.kind.value} needs a shared vocabulary")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if self.kind is TaskKind.SYNONYM_NOISE:
            content = self.tgt_vocab - NUM_RESERVED
            if not 1 <= self.fanout <= min(self.tgt_vocab // 2, content):
                raise ConfigError(f"fanout {self.fanout} must lie in [1, {min(self.tgt_vocab // 2, content)}]")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1), got {self.noise}")
        if self.size < 0:
            raise ConfigError("corpus size must be nonnegative")


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: Tuple[Pair, ...]
    src_vocab: int
    tgt_vocab: int
    spec: Optional[TaskSpec] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for line, (src, tgt) in enumerate(self.pairs, start=1):
            for tokens, vocab in ((src, self.src_vocab), (tgt, self.tgt_vocab)):
                if any(t < 0 or t >= vocab for t in tokens):
                    raise DataError(f"pair {line}: token outside vocabulary of {vocab}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    @property
    def sources(self) -> List[Sentence]:
        return [src for src, _ in self.pairs]

    @property
    def targets(self) -> List[Sentence]:
        return [tgt for _, tgt in self.pairs]


@dataclass(frozen=True)
class Batch:
    src: np.ndarray        # (B, m) int64, PAD-filled
    tgt: np.ndarray        # (B, n) int64, EOS-terminated, PAD-filled
    src_mask: np.ndarray   # (B, m) bool, True on real tokens
    tgt_mask: np.ndarray   # (B, n) bool
    indices: np.ndarray    # corpus positions of the rows

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def tgt_in(self) -> np.ndarray:
        """Decoder inputs: BOS followed by the gold prefix."""
        shifted = np.full_like(self.tgt, PAD)
        shifted[:, 0] = BOS
        shifted[:, 1:] = np.where(self.tgt_mask[:, 1:], self.tgt[:, :-1], PAD)
        return shifted


def synonym_map(spec: TaskSpec) -> Dict[int, Tuple[int, ...]]:
    """Deterministic synonym sets for every content source token."""
    rng = np.random.default_rng([spec.seed, _SYNONYM_STREAM])
    content = np.arange(NUM_RESERVED, spec.tgt_vocab)
    return {
        token: tuple(sorted(int(t) for t in rng.choice(content, size=spec.fanout, replace=False)))
        for token in range(NUM_RESERVED, spec.src_vocab)
    }


def generate_task(spec: TaskSpec, stream: int = 0) -> ParallelCorpus:
    """Generate `spec.size` pairs; `stream` separates disjoint splits."""
    rng = np.random.default_rng([spec.seed, stream])
    synonyms = synonym_map(spec) if spec.kind is TaskKind.SYNONYM_NOISE else {}
    pairs = []
    for _ in range(spec.size):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(int(t) for t in rng.integers(NUM_RESERVED, spec.src_vocab, size=length))
        if spec.kind is TaskKind.COPY:
            tgt = src
        elif spec.kind is TaskKind.REVERSE:
            tgt = src[::-1]
        else:
            tgt = tuple(_emit_synonym(rng, synonyms[token], spec) for token in src)
        pairs.append((src, tgt))
    return ParallelCorpus(tuple(pairs), spec.src_vocab, spec.tgt_vocab, spec=spec)


def _emit_synonym(rng: np.random.Generator, choices: Tuple[int, ...], spec: TaskSpec) -> int:
    token = choices[int(rng.integers(len(choices)))]
    if spec.noise > 0.0 and rng.random() < spec.noise:
        token = int(rng.integers(NUM_RESERVED, spec.tgt_vocab))
    return token


def generate_splits(
    spec: TaskSpec, dev_fraction: float = 0.1, test_fraction: float = 0.1
) -> Dict[str, ParallelCorpus]:
    """Train split of `spec.size` pairs plus dev/test sized as fractions of it."""
    for name, fraction in (("dev_fraction", dev_fraction), ("test_fraction", test_fraction)):
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {fraction}")
    sizes = {
        "train": spec.size,
        "dev": int(round(spec.size * dev_fraction)),
        "test": int(round(spec.size * test_fraction)),
    }
    return {
        split: generate_task(replace(spec, size=sizes[split]), stream=SPLIT_STREAMS[split])
        for split in SPLIT_STREAMS
    }


def make_batch(corpus: ParallelCorpus, indices: Sequence[int]) -> Batch:
    """Pad the selected pairs to the batch's longest source and target."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise DataError("a batch needs at least one pair")
    pairs = [corpus.pairs[i] for i in indices]
    src_len = max(len(src) for src, _ in pairs)
    tgt_len = max(len(tgt) for _, tgt in pairs) + 1
    src = np.full((len(pairs), src_len), PAD, dtype=np.int64)
    tgt = np.full((len(pairs), tgt_len), PAD, dtype=np.int64)
    for row, (s, t) in enumerate(pairs):
        src[row, : len(s)] = s
        tgt[row, : len(t)] = t
        tgt[row, len(t)] = EOS
    return Batch(src=src, tgt=tgt, src_mask=src != PAD, tgt_mask=tgt != PAD, indices=indices)


def batches_per_epoch(corpus: ParallelCorpus, batch_size: int) -> int:
    return -(-len(corpus) // batch_size)


def batch_iter(corpus: ParallelCorpus, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """One epoch: a seeded shuffle cut into padded batches (last may be short)."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if len(corpus) == 0:
        raise DataError("cannot batch an empty corpus")
    order = np.random.default_rng(epoch_seed).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield make_batch(corpus, order[start : start + batch_size])


def save_tsv(corpus: ParallelCorpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for src, tgt in corpus.pairs:
            fp.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def _parse_tokens(text: str, path: str, line: int) -> Sentence:
    try:
        return tuple(int(token) for token in text.split())
    except ValueError:
        raise ParseError(f"non-integer token in {text!r}", path=path, line=line) from None


def load_tsv(path: str, src_vocab: Optional[int] = None, tgt_vocab: Optional[int] = None) -> ParallelCorpus:
    """Read `source<TAB>target` lines; vocab sizes default to max id + 1."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fp:
        for line_number, line in enumerate(fp, start=1):
            line = line.rstrip("\n")
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError("expected exactly one tab separating source and target", path, line_number)
            src = _parse_tokens(fields[0], path, line_number)
            tgt = _parse_tokens(fields[1], path, line_number)
            for tokens, vocab in ((src, src_vocab), (tgt, tgt_vocab)):
                if vocab is not None and any(t < 0 or t >= vocab for t in tokens):
                    raise ParseError(f"token outside vocabulary of {vocab}", path, line_number)
            pairs.append((src, tgt))

    def inferred(side: int) -> int:
        ids = [t for pair in pairs for t in pair[side]]
        return max(ids, default=NUM_RESERVED) + 1

    return ParallelCorpus(
        tuple(pairs),
        src_vocab if src_vocab is not None else inferred(0),
        tgt_vocab if tgt_vocab is not None else inferred(1),
    )


def save_vocab(spec: TaskSpec, path: str) -> None:
    payload = {
        "src_vocab": spec.src_vocab,
        "tgt_vocab": spec.tgt_vocab,
        "reserved": RESERVED_TOKENS,
        "task": spec.kind.value,
        "synonyms": (
            {str(k): list(v) for k, v in synonym_map(spec).items()}
            if spec.kind is TaskKind.SYNONYM_NOISE
            else {}
        ),
    }
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_vocab(path: str) -> Dict:
    if not os.path.exists(path):
        raise DataError(f"vocabulary file not found: {path}")
    with open(path, "r", encoding="utf-8") as fp:
        try:
            return json.load(fp)
        except json.JSONDecodeError as err:
            raise ParseError(err.msg, path=path, line=err.lineno) from None
