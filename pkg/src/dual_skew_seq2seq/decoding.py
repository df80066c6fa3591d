"""Greedy and beam-search decoding.

Ties are broken toward the lowest token id (for beams: the lexicographically
smallest token sequence), so decodes are deterministic.
"""

import concurrent.futures
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from . import config
from .corpus import BOS, EOS
from .errors import ConfigError
from .seq2seq import IncrementalDecoder, Seq2SeqParams

log = logging.getLogger(__name__)


class DecodeMode(str, Enum):
    GREEDY = "greedy"
    BEAM = "beam"


@dataclass(frozen=True)
class DecodeConfig:
    mode: DecodeMode = DecodeMode.GREEDY
    beam_width: int = 1
    max_len: int = 64
    # score = log p / len ** length_penalty; 0 disables normalization
    length_penalty: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DecodeMode(self.mode))
        if self.beam_width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.beam_width}")
        if self.mode is DecodeMode.GREEDY and self.beam_width != 1:
            raise ConfigError("greedy decoding uses beam width 1")
        if self.max_len < 1:
            raise ConfigError(f"max output length must be >= 1, got {self.max_len}")
        if self.length_penalty < 0.0:
            raise ConfigError("length penalty exponent must be nonnegative")

    @classmethod
    def beam(cls, width: int, max_len: int = 64, length_penalty: float = 0.0) -> "DecodeConfig":
        return cls(DecodeMode.BEAM, width, max_len, length_penalty)

    @property
    def label(self) -> str:
        return "greedy" if self.mode is DecodeMode.GREEDY else f"beam{self.beam_width}"


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple      # EOS included when emitted
    log_prob: float
    finished: bool = True

    def score(self, length_penalty: float = 0.0) -> float:
        if length_penalty == 0.0:
            return self.log_prob
        return self.log_prob / max(1, len(self.tokens)) ** length_penalty

    @property
    def output(self) -> tuple:
        """Tokens with the closing EOS removed."""
        if self.tokens and self.tokens[-1] == EOS:
            return self.tokens[:-1]
        return self.tokens


def greedy_decode(params: Seq2SeqParams, src: Sequence[int], config: DecodeConfig = DecodeConfig()) -> Hypothesis:
    decoder = IncrementalDecoder(params, src)
    state = decoder.initial_state()
    tokens: List[int] = []
    total = 0.0
    previous = BOS
    for _ in range(config.max_len):
        state, log_probs = decoder.step([previous], state)
        token = int(np.argmax(log_probs[0]))
        total += log_probs[0, token]
        tokens.append(token)
        if token == EOS:
            return Hypothesis(tuple(tokens), float(total), finished=True)
        previous = token
    return Hypothesis(tuple(tokens), float(total), finished=False)


def beam_decode(params: Seq2SeqParams, src: Sequence[int], config: DecodeConfig) -> List[Hypothesis]:
    """Length-synchronous beam search; returns hypotheses best first."""
    width = config.beam_width
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    decoder = IncrementalDecoder(params, src)

    # parallel lists describing the alive hypotheses
    alive_tokens: List[tuple] = [()]
    alive_scores: List[float] = [0.0]
    alive_states = decoder.initial_state()
    finished: List[Hypothesis] = []

    for _ in range(config.max_len):
        previous = [tokens[-1] if tokens else BOS for tokens in alive_tokens]
        states, log_probs = decoder.step(previous, alive_states)
        candidates = []
        for k, (tokens, score) in enumerate(zip(alive_tokens, alive_scores)):
            for token in range(log_probs.shape[1]):
                candidates.append((score + log_probs[k, token], tokens + (token,), k))
        # all candidates share one length, so raw log-probability ranks them
        candidates.sort(key=lambda c: (-c[0], c[1]))

        alive_tokens, alive_scores, keep = [], [], []
        for score, tokens, k in candidates[:width]:
            if tokens[-1] == EOS:
                finished.append(Hypothesis(tokens, float(score), finished=True))
            else:
                alive_tokens.append(tokens)
                alive_scores.append(float(score))
                keep.append(k)
        if not alive_tokens:
            break
        alive_states = states[keep]
        if config.length_penalty == 0.0 and finished:
            # extensions only lower a log-probability
            if max(h.log_prob for h in finished) >= max(alive_scores):
                alive_tokens = []
                break

    finished.extend(
        Hypothesis(tokens, score, finished=False) for tokens, score in zip(alive_tokens, alive_scores)
    )
    return sorted(finished, key=lambda h: (-h.score(config.length_penalty), h.tokens))


def decode(params: Seq2SeqParams, src: Sequence[int], config: DecodeConfig) -> Hypothesis:
    if config.mode is DecodeMode.GREEDY:
        return greedy_decode(params, src, config)
    return beam_decode(params, src, config)[0]


def decode_corpus(
    params: Seq2SeqParams,
    sources: Sequence[Sequence[int]],
    decode_config: DecodeConfig,
    max_workers: Optional[int] = None,
) -> List[Hypothesis]:
    """Decode every source sentence, fanned across a thread pool; input order is kept."""
    max_workers = max_workers or config.MAX_CONCURRENT_THREADS
    results: List[Optional[Hypothesis]] = [None] * len(sources)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(decode, params, src, decode_config): index for index, src in enumerate(sources)
        }
        for future in concurrent.futures.as_completed(future_to_index):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as err:
                log.error(
                    f"** Error while decoding sentence {index} due to {err}",
                    exc_info=config.FULL_LOGGING,
                )
                raise
    return results
