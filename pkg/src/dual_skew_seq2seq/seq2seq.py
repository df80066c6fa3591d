"""Attention encoder-decoder built from numerics ops.

Encoder: bidirectional GRU over source embeddings; annotation h_i is the
concatenation of the forward and backward states at position i.
Attention: additive, scored against the previous decoder state s_{j-1}.
Decoder: GRU over [embedding(y_{j-1}); c_j]; output logits are a linear map
of [s_j; c_j; embedding(y_{j-1})].
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import BOS, NUM_RESERVED, PAD, Batch
from .errors import ConfigError, DataError, DimensionError
from .numerics import ops
from .numerics.tape import Tape, Tensor

log = logging.getLogger(__name__)

INIT_SCALE = 0.08
# additive bias that removes PAD positions from the attention softmax
MASKED_SCORE = -1e30
GATES = ("z", "r", "n")


@dataclass(frozen=True)
class Seq2SeqConfig:
    src_vocab: int
    tgt_vocab: int
    emb_dim: int = 32
    hidden_dim: int = 64
    attn_dim: Optional[int] = None
    max_src_len: int = 64
    max_tgt_len: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("emb_dim", "hidden_dim", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.attn_dim is not None and self.attn_dim < 1:
            raise ConfigError("attn_dim must be >= 1")
        for name in ("src_vocab", "tgt_vocab"):
            if getattr(self, name) <= NUM_RESERVED:
                raise ConfigError(f"{name} must exceed the {NUM_RESERVED} reserved ids")

    @property
    def attention_dim(self) -> int:
        return self.attn_dim if self.attn_dim is not None else self.hidden_dim

    def to_dict(self) -> Dict:
        return {
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "emb_dim": self.emb_dim,
            "hidden_dim": self.hidden_dim,
            "attn_dim": self.attn_dim,
            "max_src_len": self.max_src_len,
            "max_tgt_len": self.max_tgt_len,
            "seed": self.seed,
        }


def _gru_shapes(prefix: str, input_dim: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for gate in GATES:
        shapes[f"{prefix}.W_{gate}"] = (input_dim, hidden)
        shapes[f"{prefix}.U_{gate}"] = (hidden, hidden)
        shapes[f"{prefix}.b_{gate}"] = (hidden,)
    return shapes


def param_shapes(config: Seq2SeqConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in their declared (checkpoint) order."""
    E, H, A = config.emb_dim, config.hidden_dim, config.attention_dim
    shapes = {
        "src_emb": (config.src_vocab, E),
        "tgt_emb": (config.tgt_vocab, E),
    }
    shapes.update(_gru_shapes("enc_fwd", E, H))
    shapes.update(_gru_shapes("enc_bwd", E, H))
    shapes.update({
        "dec_init.W": (H, H),
        "dec_init.b": (H,),
        "att.W": (H, A),
        "att.U": (2 * H, A),
        "att.v": (A, 1),
    })
    shapes.update(_gru_shapes("dec", E + 2 * H, H))
    shapes.update({
        "out.W": (H + 2 * H + E, config.tgt_vocab),
        "out.b": (config.tgt_vocab,),
    })
    return shapes


@dataclass
class Seq2SeqParams:
    config: Seq2SeqConfig
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        if list(self.arrays) != list(expected):
            raise DimensionError("parameter names do not match the model layout")
        for name, shape in expected.items():
            array = np.asarray(self.arrays[name], dtype=np.float64)
            if array.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {array.shape}")
            if array.flags.writeable:
                array = array.copy()
                array.flags.writeable = False
            self.arrays[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def with_arrays(self, updates: Dict[str, np.ndarray]) -> "Seq2SeqParams":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return Seq2SeqParams(self.config, arrays)


def init_params(config: Seq2SeqConfig) -> Seq2SeqParams:
    """Seeded uniform initialization in [-0.08, 0.08]."""
    rng = np.random.default_rng(config.seed)
    arrays = {
        name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        for name, shape in param_shapes(config).items()
    }
    return Seq2SeqParams(config, arrays)


def bind(params: Seq2SeqParams, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
    """Parameters as tensors: tape leaves when tracing, constants otherwise."""
    if tape is None:
        return {name: Tensor(array) for name, array in params.arrays.items()}
    return tape.watch_all(params.arrays)


def _gru(w: Dict[str, Tensor], prefix: str, x: Tensor, h: Tensor) -> Tensor:
    z = ops.sigmoid(x @ w[f"{prefix}.W_z"] + h @ w[f"{prefix}.U_z"] + w[f"{prefix}.b_z"])
    r = ops.sigmoid(x @ w[f"{prefix}.W_r"] + h @ w[f"{prefix}.U_r"] + w[f"{prefix}.b_r"])
    n = ops.tanh(x @ w[f"{prefix}.W_n"] + (r * h) @ w[f"{prefix}.U_n"] + w[f"{prefix}.b_n"])
    # (1 - z) * n + z * h
    return n + z * (h - n)


@dataclass(frozen=True)
class Encoding:
    annotations: Tensor   # (B, m, 2H)
    keys: Tensor          # (B, m, A), annotations projected for attention
    src_bias: Tensor      # (B, m), 0 on tokens, MASKED_SCORE on PAD
    init_state: Tensor    # (B, H)

    @property
    def batch_size(self) -> int:
        return self.annotations.shape[0]


def _as_batch(src, mask) -> Tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if src.ndim != 2 or src.shape[1] == 0:
        raise DataError("source must be a non-empty token sequence or batch")
    mask = src != PAD if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != src.shape:
        raise DimensionError("source mask does not match source shape")
    return src, mask


def encode(params: Seq2SeqParams, src, src_mask=None, weights: Optional[Dict[str, Tensor]] = None) -> Encoding:
    """Bidirectional GRU annotations for a token sequence or a padded batch."""
    src, mask = _as_batch(src, src_mask)
    config = params.config
    if src.shape[1] > config.max_src_len:
        raise DataError(f"source length {src.shape[1]} exceeds {config.max_src_len}")
    if not mask.any(axis=1).all():
        raise DataError("source sentence without any non-PAD token")
    if src.min() < 0 or src.max() >= config.src_vocab:
        raise DataError(f"source token outside vocabulary of {config.src_vocab}")
    w = weights if weights is not None else bind(params)
    B, m = src.shape
    H = config.hidden_dim
    keep = [ops.constant(mask[:, t : t + 1].astype(np.float64)) for t in range(m)]

    def run(prefix: str, positions) -> Dict[int, Tensor]:
        h = ops.constant(np.zeros((B, H)))
        states = {}
        for t in positions:
            x = ops.gather(w["src_emb"], src[:, t])
            # PAD positions leave the state untouched
            h = h + keep[t] * (_gru(w, prefix, x, h) - h)
            states[t] = h
        return states

    forward = run("enc_fwd", range(m))
    backward = run("enc_bwd", reversed(range(m)))
    annotations = ops.concat(
        [ops.reshape(ops.concat([forward[t], backward[t]], axis=-1), (B, 1, 2 * H)) for t in range(m)],
        axis=1,
    )
    init_state = ops.tanh(backward[0] @ w["dec_init.W"] + w["dec_init.b"])
    return Encoding(
        annotations=annotations,
        keys=annotations @ w["att.U"],
        src_bias=ops.constant(np.where(mask, 0.0, MASKED_SCORE)),
        init_state=init_state,
    )


def attend(
    params: Seq2SeqParams,
    state: Tensor,
    encoding: Encoding,
    weights: Optional[Dict[str, Tensor]] = None,
) -> Tuple[Tensor, Tensor]:
    """Additive attention of decoder state (B, H) over the annotations.

    Returns the context (B, 2H) and the weights (B, m).
    """
    w = weights if weights is not None else bind(params)
    B, m, _ = encoding.annotations.shape
    if state.ndim != 2 or state.shape != (B, params.config.hidden_dim):
        raise DimensionError(f"decoder state {state.shape} does not match batch {B} x {params.config.hidden_dim}")
    query = ops.reshape(state @ w["att.W"], (B, 1, params.config.attention_dim))
    scores = ops.reshape(ops.tanh(encoding.keys + query) @ w["att.v"], (B, m))
    alpha = ops.softmax(scores + encoding.src_bias, axis=-1)
    context = ops.sum(ops.reshape(alpha, (B, m, 1)) * encoding.annotations, axis=1)
    return context, alpha


@dataclass(frozen=True)
class DecoderStep:
    state: Tensor       # s_j, (B, H)
    logits: Tensor      # (B, V)
    attention: Tensor   # alpha_j, (B, m)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(ops.log_softmax(self.logits).value)


def decode_step(
    params: Seq2SeqParams,
    y_prev,
    state: Tensor,
    encoding: Encoding,
    weights: Optional[Dict[str, Tensor]] = None,
) -> DecoderStep:
    """One decoder step: s_j = GRU([emb(y_{j-1}); c_j], s_{j-1})."""
    w = weights if weights is not None else bind(params)
    y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1)
    if y_prev.min() < 0 or y_prev.max() >= params.config.tgt_vocab:
        raise DataError(f"target token outside vocabulary of {params.config.tgt_vocab}")
    context, alpha = attend(params, state, encoding, w)
    embedded = ops.gather(w["tgt_emb"], y_prev)
    new_state = _gru(w, "dec", ops.concat([embedded, context], axis=-1), state)
    logits = ops.concat([new_state, context, embedded], axis=-1) @ w["out.W"] + w["out.b"]
    return DecoderStep(state=new_state, logits=logits, attention=alpha)


@dataclass(frozen=True)
class ForwardTrace:
    """Teacher-forced outputs for the non-PAD target positions.

    Rows are ordered sentence by sentence, position by position.
    """
    logits: Tensor              # (N, V)
    targets: np.ndarray         # (N,)
    sentence_ids: np.ndarray    # (N,), row of the batch each position came from
    attention: np.ndarray       # (n, B, m)
    tape: Optional[Tape] = None
    weights: Optional[Dict[str, Tensor]] = None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(ops.log_softmax(self.logits).value)

    def __len__(self) -> int:
        return self.targets.shape[0]


def forward_teacher_forced(params: Seq2SeqParams, batch: Batch, tape: Optional[Tape] = None) -> ForwardTrace:
    """Decode `batch` with gold previous tokens; PAD positions are dropped."""
    if batch.src.shape[0] != batch.tgt.shape[0]:
        raise DataError("source and target batches differ in size")
    if batch.tgt.shape[1] > params.config.max_tgt_len:
        raise DataError(f"target length {batch.tgt.shape[1]} exceeds {params.config.max_tgt_len}")
    w = bind(params, tape)
    encoding = encode(params, batch.src, batch.src_mask, w)
    B, n = batch.tgt.shape
    V = params.config.tgt_vocab
    if batch.tgt.min() < 0 or batch.tgt.max() >= V:
        raise DataError(f"target token outside vocabulary of {V}")

    state = encoding.init_state
    steps, attention = [], []
    inputs = batch.tgt_in
    for j in range(n):
        step = decode_step(params, inputs[:, j], state, encoding, w)
        state = step.state
        steps.append(ops.reshape(step.logits, (1, B, V)))
        attention.append(step.attention.value)

    time_major = ops.reshape(ops.concat(steps, axis=0), (n * B, V))
    rows, cols = np.nonzero(batch.tgt_mask)  # row-major: sentence, then position
    logits = ops.gather(time_major, cols * B + rows)
    return ForwardTrace(
        logits=logits,
        targets=batch.tgt[rows, cols],
        sentence_ids=rows,
        attention=np.stack(attention),
        tape=tape,
        weights=w if tape is not None else None,
    )


class IncrementalDecoder:
    """Step-by-step decoding of one source sentence for K parallel hypotheses."""

    def __init__(self, params: Seq2SeqParams, src: Sequence[int]) -> None:
        self.params = params
        self.weights = bind(params)
        self.encoding = encode(params, np.asarray(src, dtype=np.int64), weights=self.weights)
        self._tiled: Dict[int, Encoding] = {1: self.encoding}

    def initial_state(self) -> np.ndarray:
        return self.encoding.init_state.value

    def _encoding_for(self, k: int) -> Encoding:
        if k not in self._tiled:
            e = self.encoding
            self._tiled[k] = Encoding(
                annotations=ops.constant(np.repeat(e.annotations.value, k, axis=0)),
                keys=ops.constant(np.repeat(e.keys.value, k, axis=0)),
                src_bias=ops.constant(np.repeat(e.src_bias.value, k, axis=0)),
                init_state=ops.constant(np.repeat(e.init_state.value, k, axis=0)),
            )
        return self._tiled[k]

    def step(self, y_prev: Sequence[int], states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Advance K hypotheses; returns (new states (K, H), log-probs (K, V))."""
        states = np.atleast_2d(states)
        encoding = self._encoding_for(states.shape[0])
        out = decode_step(self.params, y_prev, ops.constant(states), encoding, self.weights)
        return out.state.value, ops.log_softmax(out.logits).value


def sequence_log_prob(params: Seq2SeqParams, src: Sequence[int], tokens: Sequence[int]) -> float:
    """Sum of log p(y_j | y_<j, x) over `tokens` (BOS excluded)."""
    decoder = IncrementalDecoder(params, src)
    state = decoder.initial_state()
    previous = BOS
    total = 0.0
    for token in tokens:
        state, log_probs = decoder.step([previous], state)
        total += float(log_probs[0, token])
        previous = token
    return total
