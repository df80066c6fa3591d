"""Hybrid training: maximum likelihood first, then DSD or controlled DSD.

A schedule is a list of phases. Each phase fixes a loss, an optimizer and a
learning rate from its start step on. Parameters carry over unchanged at a
phase boundary; a new optimizer is created only when its kind changes.
"""

import json
import logging
import os
import sys
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import Checkpoint, save_checkpoint
from .controller import BetaController, ControllerConfig, ControllerState
from .corpus import Batch, ParallelCorpus, batch_iter, batches_per_epoch, make_batch
from .decoding import DecodeConfig, decode_corpus
from .divergences import (
    DEFAULT_ALPHA,
    Aggregation,
    LossKind,
    cross_entropy,
    loss_for_kind,
    one_hot,
    sample_divergence,
    token_weights,
)
from .errors import ConfigError, NumericError, ParseError
from .metrics import BleuReport, corpus_bleu
from .numerics import ops
from .numerics.tape import Tape
from .optim import Optimizer, clip_grad_norm, make_optimizer
from .seq2seq import Seq2SeqParams, forward_teacher_forced

log = logging.getLogger(__name__)

ML_LOSSES = (LossKind.XENT, LossKind.XENT_SMOOTH)
OPTIMIZER_KINDS = ("adam", "sgd")
LATEST = "latest.ckpt"
LAST_GOOD = "last_good.ckpt"


@dataclass(frozen=True)
class Phase:
    start: int
    loss: LossKind = LossKind.XENT_SMOOTH
    optimizer: str = "adam"
    lr: float = 3e-4
    smoothing: float = 0.0
    beta: Optional[float] = None  # fixed balanced weight, DSD only

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.start < 0:
            raise ConfigError(f"phase start must be >= 0, got {self.start}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.loss is LossKind.DSD:
            if self.beta is None or not 0.0 <= self.beta <= 1.0:
                raise ConfigError(f"DSD phase needs beta in [0, 1], got {self.beta}")
        elif self.beta is not None:
            raise ConfigError(f"a fixed beta only applies to DSD phases, not {self.loss.value}")

    @property
    def is_ml(self) -> bool:
        return self.loss in ML_LOSSES

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["loss"] = self.loss.value
        return data


class SwitchRule(str, Enum):
    FIXED = "fixed"
    # leave the ML phase once dev loss stalls for `patience` evals; the
    # nominal switch step stays the latest possible switch
    PLATEAU = "plateau"


@dataclass(frozen=True)
class TrainSchedule:
    phases: Tuple[Phase, ...]
    total_steps: int
    switch_rule: SwitchRule = SwitchRule.PLATEAU
    patience: int = 3
    clip_norm: Optional[float] = 5.0
    alpha: float = DEFAULT_ALPHA
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    set_point_window: int = 100
    aggregation: Aggregation = Aggregation.MEAN_PER_TOKEN

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", tuple(self.phases))
        object.__setattr__(self, "switch_rule", SwitchRule(self.switch_rule))
        try:
            object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        except ValueError as err:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}") from err
        if not self.phases:
            raise ConfigError("a schedule needs at least one phase")
        if self.phases[0].start != 0:
            raise ConfigError("the first phase must start at step 0")
        starts = [phase.start for phase in self.phases]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"phase starts must be strictly increasing, got {starts}")
        if self.total_steps <= starts[-1]:
            raise ConfigError(f"total_steps {self.total_steps} leaves the last phase empty")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ConfigError("clip_norm must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.set_point_window < 1:
            raise ConfigError("set_point_window must be >= 1")

    def phase_at(self, step: int) -> int:
        index = 0
        for i, phase in enumerate(self.phases):
            if phase.start <= step:
                index = i
        return index

    @property
    def switch_step(self) -> Optional[int]:
        return self.phases[1].start if len(self.phases) > 1 else None

    def with_switch(self, step: int) -> "TrainSchedule":
        """Move the first boundary to `step`; later phases keep their durations."""
        if self.switch_step is None:
            raise ConfigError("a single-phase schedule has no switching point")
        if step < 0:
            raise ConfigError(f"switching point must be >= 0, got {step}")
        offset = step - self.switch_step
        later = [replace(phase, start=phase.start + offset) for phase in self.phases[1:]]
        # switching at 0 drops the first phase
        phases = later if step == 0 else [self.phases[0], *later]
        return replace(self, phases=tuple(phases), total_steps=self.total_steps + offset)

    @classmethod
    def default(
        cls,
        controller: Optional[ControllerConfig] = None,
        switch_rule: SwitchRule = SwitchRule.PLATEAU,
    ) -> "TrainSchedule":
        """Up to 3000 ML steps, 2000 cDSD steps at lr 0.1, 1000 at lr 0.05.

        Under the plateau rule the ML phase ends early once dev loss stops improving.
        """
        return cls(
            phases=(
                Phase(0, LossKind.XENT_SMOOTH, "adam", 3e-4, smoothing=0.1),
                Phase(3000, LossKind.CDSD, "sgd", 0.1),
                Phase(5000, LossKind.CDSD, "sgd", 0.05),
            ),
            total_steps=6000,
            controller=controller or ControllerConfig(),
            switch_rule=switch_rule,
        )

    def as_optimizer_switch_only(self) -> "TrainSchedule":
        """Control run: every later phase keeps the first phase's ML loss."""
        first = self.phases[0]
        phases = [first] + [
            replace(phase, loss=first.loss, smoothing=first.smoothing, beta=None) for phase in self.phases[1:]
        ]
        return replace(self, phases=tuple(phases))

    def to_dict(self) -> Dict:
        return {
            "phases": [phase.to_dict() for phase in self.phases],
            "total_steps": self.total_steps,
            "switch_rule": self.switch_rule.value,
            "patience": self.patience,
            "clip_norm": self.clip_norm,
            "alpha": self.alpha,
            "controller": asdict(self.controller),
            "set_point_window": self.set_point_window,
            "aggregation": self.aggregation.value,
        }


@dataclass(frozen=True)
class EvalCadence:
    log_every: int = 10
    eval_every: int = 200
    checkpoint_every: int = 500
    record_wall_clock: bool = False
    # decode only the first N dev sentences for BLEU; None decodes all
    dev_limit: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("log_every", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dev_limit is not None and self.dev_limit < 1:
            raise ConfigError("dev_limit must be >= 1")


@dataclass(frozen=True)
class MetricsRecord:
    """One JSON-Lines row; the same keys in every phase of every run."""
    step: int
    phase: int
    loss_kind: str
    loss: float
    xent: float
    u: float
    beta: Optional[float]
    lr: float
    grad_norm: float
    dev_bleu: Optional[float] = None
    wall_clock: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def read_metrics(path: str) -> List[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as fp:
        for line_no, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                records.append(MetricsRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as err:
                raise ParseError(f"bad metrics record: {err}", path=path, line=line_no) from None
    return records


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[MetricsRecord]
    switch_step: Optional[int]
    set_point: Optional[float]


def evaluate_hook(
    checkpoint: Union[Checkpoint, Seq2SeqParams],
    dev: ParallelCorpus,
    decode_config: DecodeConfig,
    limit: Optional[int] = None,
) -> BleuReport:
    """Decode the dev set and score it with corpus BLEU."""
    params = checkpoint.params if isinstance(checkpoint, Checkpoint) else checkpoint
    pairs = dev.pairs[:limit] if limit else dev.pairs
    hypotheses = decode_corpus(params, [src for src, _ in pairs], decode_config)
    return corpus_bleu([h.output for h in hypotheses], [tgt for _, tgt in pairs])


def dev_loss(params: Seq2SeqParams, dev: ParallelCorpus, batch_size: int) -> float:
    """Teacher-forced cross entropy over the dev set, averaged per sentence."""
    total = 0.0
    for start in range(0, len(dev), batch_size):
        batch = make_batch(dev, range(start, min(start + batch_size, len(dev))))
        trace = forward_teacher_forced(params, batch)
        weights = token_weights(trace.sentence_ids)
        total += cross_entropy(trace.logits.value, trace.targets, weights=weights).value * len(batch)
    return total / len(dev)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


class Trainer:
    """Runs a schedule over a training corpus, one update per batch."""

    def __init__(
        self,
        params: Seq2SeqParams,
        train_corpus: ParallelCorpus,
        schedule: TrainSchedule,
        *,
        batch_size: int = 32,
        seed: int = 0,
        dev: Optional[ParallelCorpus] = None,
        cadence: EvalCadence = EvalCadence(),
        decode_config: Optional[DecodeConfig] = None,
        out_dir: Optional[str] = None,
        on_record: Optional[Callable[[MetricsRecord], None]] = None,
        progress: bool = True,
    ) -> None:
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        if schedule.switch_rule is SwitchRule.PLATEAU and schedule.switch_step is not None and dev is None:
            raise ConfigError("the plateau switching rule needs a dev corpus")
        self.logger = logging.getLogger(__name__)
        self.params = params
        self.train_corpus = train_corpus
        self.nominal_schedule = schedule
        self.schedule = schedule
        self.batch_size = batch_size
        self.seed = seed
        self.dev = dev
        self.cadence = cadence
        self.decode_config = decode_config or DecodeConfig(max_len=params.config.max_tgt_len)
        self.out_dir = out_dir
        self.on_record = on_record
        self.progress = progress

        self.step = 0
        self.phase_index = 0
        self.optimizer: Optimizer = make_optimizer(schedule.phases[0].optimizer)
        self.controller: Optional[BetaController] = None
        self.set_point: Optional[float] = schedule.controller.set_point
        self.switch_step: Optional[int] = None
        self.ml_losses: deque = deque(maxlen=schedule.set_point_window)
        self.best_dev_loss = float("inf")
        self.stale_evals = 0
        self.metrics: List[MetricsRecord] = []
        self._started = time.monotonic()

    @property
    def phase(self) -> Phase:
        return self.schedule.phases[self.phase_index]

    @property
    def metrics_path(self) -> Optional[str]:
        return os.path.join(self.out_dir, "metrics.jsonl") if self.out_dir else None

    # -- checkpoints -------------------------------------------------------

    def make_checkpoint(self, params: Optional[Seq2SeqParams] = None) -> Checkpoint:
        n = batches_per_epoch(self.train_corpus, self.batch_size)
        return Checkpoint(
            params=params or self.params,
            step=self.step,
            phase=self.phase_index,
            controller=self.controller.state.to_dict() if self.controller else None,
            rng={"seed": self.seed, "epoch": self.step // n, "offset": self.step % n},
            optimizer=self.optimizer.state_dict(),
            extra={
                "switch_step": self.switch_step,
                "effective_switch": self.schedule.switch_step,
                "set_point": self.set_point,
                "ml_losses": list(self.ml_losses),
                "best_dev_loss": None if self.best_dev_loss == float("inf") else self.best_dev_loss,
                "stale_evals": self.stale_evals,
            },
        )

    def save(self, name: str, params: Optional[Seq2SeqParams] = None) -> Optional[str]:
        if not self.out_dir:
            return None
        ckpt = self.make_checkpoint(params)
        path = os.path.join(self.out_dir, name)
        save_checkpoint(path, ckpt)
        if name != LAST_GOOD:
            save_checkpoint(os.path.join(self.out_dir, LATEST), ckpt)
        self.logger.info(f"** Saved checkpoint {path} at step {self.step}")
        return path

    def restore(self, ckpt: Checkpoint) -> None:
        """Continue from `ckpt` exactly where the run that wrote it stood."""
        if ckpt.params.config != self.params.config:
            raise ConfigError("checkpoint model config differs from the run config")
        extra = ckpt.extra
        self.params = ckpt.params
        self.step = ckpt.step
        if extra.get("effective_switch") not in (None, self.nominal_schedule.switch_step):
            self.schedule = self.nominal_schedule.with_switch(extra["effective_switch"])
        self.phase_index = ckpt.phase
        self.optimizer = make_optimizer(self.phase.optimizer)
        if ckpt.optimizer is not None:
            self.optimizer.load_state_dict(ckpt.optimizer)
        self.switch_step = extra.get("switch_step")
        self.set_point = extra.get("set_point")
        self.ml_losses = deque(extra.get("ml_losses", []), maxlen=self.schedule.set_point_window)
        best = extra.get("best_dev_loss")
        self.best_dev_loss = float("inf") if best is None else best
        self.stale_evals = extra.get("stale_evals", 0)
        if ckpt.controller is not None:
            self.controller = BetaController(
                self.schedule.controller.with_set_point(self.set_point),
                ControllerState.from_dict(ckpt.controller),
            )
        self.logger.info(f"** Resumed at step {self.step} in phase {self.phase_index}")

    # -- data --------------------------------------------------------------

    def batches(self) -> Iterator[Batch]:
        """Endless batch stream from the current step; each epoch reshuffles."""
        n = batches_per_epoch(self.train_corpus, self.batch_size)
        epoch, skip = divmod(self.step, n)
        while True:
            for i, batch in enumerate(batch_iter(self.train_corpus, self.batch_size, epoch_seed(self.seed, epoch))):
                if i >= skip:
                    yield batch
            skip = 0
            epoch += 1

    # -- phases ------------------------------------------------------------

    def _resolve_set_point(self) -> float:
        if self.set_point is None:
            if not self.ml_losses:
                raise ConfigError("no set point configured and no ML steps to measure one from")
            self.set_point = float(np.mean(self.ml_losses))
            self.logger.info(f"** Measured set point {self.set_point:.6f} from the last {len(self.ml_losses)} ML steps")
        return self.set_point

    def _enter_phase(self, index: int) -> None:
        previous, phase = self.phase, self.schedule.phases[index]
        if self.step > 0:
            self.save(f"phase{index}-step{self.step}.ckpt")
        if phase.optimizer != previous.optimizer or self.step == 0:
            self.optimizer = make_optimizer(phase.optimizer)
        if previous.is_ml and not phase.is_ml and self.switch_step is None:
            self.switch_step = self.step
        if phase.loss is LossKind.CDSD and self.controller is None:
            self.controller = BetaController(self.schedule.controller.with_set_point(self._resolve_set_point()))
        self.phase_index = index
        self.logger.info(
            f"** Step {self.step}: phase {index} ({phase.loss.value}, {phase.optimizer}, lr={phase.lr})"
        )

    # -- one update --------------------------------------------------------

    def train_step(self, batch: Batch) -> MetricsRecord:
        phase = self.phase
        schedule = self.schedule
        tape = Tape()
        trace = forward_teacher_forced(self.params, batch, tape)
        logits = trace.logits.value
        weights = token_weights(trace.sentence_ids)

        # u(t) and the diagnostic cross entropy share the loss's forward pass
        u = sample_divergence(
            trace.probs,
            one_hot(trace.targets, logits.shape[-1]),
            schedule.alpha,
            schedule.aggregation,
            trace.sentence_ids,
        )
        xent = cross_entropy(logits, trace.targets, weights=weights).value

        beta = phase.beta
        if phase.loss is LossKind.CDSD:
            beta = self.controller.step(u).beta
        output = loss_for_kind(
            phase.loss,
            logits,
            trace.targets,
            smoothing=phase.smoothing,
            alpha=schedule.alpha,
            beta=beta,
            weights=weights,
        )
        if not np.isfinite(output.value):
            raise NumericError("training loss is not finite", step=self.step)

        tape.backward(ops.attach_loss(trace.logits, output))
        grads = {name: tape.grad(tensor) for name, tensor in trace.weights.items()}
        grads, grad_norm = clip_grad_norm(grads, schedule.clip_norm)
        self.params = self.params.with_arrays(self.optimizer.step(self.params.arrays, grads, phase.lr, step=self.step))

        if phase.is_ml:
            self.ml_losses.append(output.value)
        return MetricsRecord(
            step=self.step + 1,
            phase=self.phase_index,
            loss_kind=phase.loss.value,
            loss=output.value,
            xent=xent,
            u=u,
            beta=beta,
            lr=phase.lr,
            grad_norm=grad_norm,
        )

    # -- evaluation --------------------------------------------------------

    def _evaluate(self) -> Optional[float]:
        if self.dev is None:
            return None
        report = evaluate_hook(self.params, self.dev, self.decode_config, self.cadence.dev_limit)
        self.logger.info(f"** Step {self.step}: dev BLEU {report.score:.2f}")

        if self.schedule.switch_rule is SwitchRule.PLATEAU and self.phase_index == 0 and self.switch_step is None:
            loss = dev_loss(self.params, self.dev, self.batch_size)
            if loss < self.best_dev_loss:
                self.best_dev_loss, self.stale_evals = loss, 0
            else:
                self.stale_evals += 1
            nominal = self.schedule.switch_step
            if self.stale_evals >= self.schedule.patience and nominal is not None and self.step < nominal:
                self.logger.info(f"** Dev loss plateaued; switching at step {self.step} instead of {nominal}")
                self.schedule = self.schedule.with_switch(self.step)
        return report.score

    # -- metrics stream ----------------------------------------------------

    def _open_metrics(self):
        path = self.metrics_path
        if path is None:
            return None
        kept: List[str] = []
        if self.step > 0 and os.path.exists(path):
            # drop rows written after the checkpoint being resumed
            kept = [r.to_json() for r in read_metrics(path) if r.step <= self.step]
        fp = open(path, "w", encoding="utf-8")
        for line in kept:
            fp.write(line + "\n")
        return fp

    def _emit(self, record: MetricsRecord, fp) -> None:
        self.metrics.append(record)
        if fp is not None:
            fp.write(record.to_json() + "\n")
            fp.flush()
        if self.on_record is not None:
            self.on_record(record)

    # -- main loop ---------------------------------------------------------

    def run(self) -> TrainResult:
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
        if self.step == 0:
            self._enter_phase(0)
        cadence = self.cadence
        bar = tqdm(
            total=self.schedule.total_steps,
            initial=self.step,
            desc="train",
            disable=not (self.progress and sys.stderr.isatty()),
        )
        fp = self._open_metrics()
        try:
            batches = self.batches()
            while self.step < self.schedule.total_steps:
                index = self.schedule.phase_at(self.step)
                if index != self.phase_index:
                    self._enter_phase(index)
                before = self.params
                controller_before = self.controller.state.to_dict() if self.controller else None
                try:
                    record = self.train_step(next(batches))
                except NumericError as err:
                    if controller_before is not None:
                        self.controller.state = ControllerState.from_dict(controller_before)
                    self.save(LAST_GOOD, before)
                    self.logger.error(f"** Training diverged at step {self.step}; wrote {LAST_GOOD}")
                    if err.step is None:
                        raise NumericError(str(err), step=self.step) from err
                    raise
                self.step += 1
                bar.update(1)
                bar.set_postfix(loss=f"{record.loss:.4f}", phase=self.phase_index)

                dev_bleu = self._evaluate() if self.step % cadence.eval_every == 0 else None
                if self.step % cadence.log_every == 0 or dev_bleu is not None:
                    if cadence.record_wall_clock:
                        record = replace(record, wall_clock=time.monotonic() - self._started)
                    self._emit(replace(record, dev_bleu=dev_bleu), fp)
                if self.step % cadence.checkpoint_every == 0:
                    self.save(f"step{self.step}.ckpt")
        finally:
            bar.close()
            if fp is not None:
                fp.close()

        self.save("final.ckpt")
        return TrainResult(
            checkpoint=self.make_checkpoint(),
            metrics=list(self.metrics),
            switch_step=self.switch_step,
            set_point=self.set_point,
        )


def train(
    params: Seq2SeqParams,
    train_corpus: ParallelCorpus,
    schedule: TrainSchedule,
    **kwargs,
) -> TrainResult:
    return Trainer(params, train_corpus, schedule, **kwargs).run()
