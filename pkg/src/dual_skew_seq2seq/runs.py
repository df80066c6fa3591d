"""Run configuration, run directories and their bookkeeping files.

A run directory holds:
    manifest.json   resolved config snapshot, version, start time, inventory;
                    written once before training and never rewritten
    status.json     running / completed / failed, updated atomically
    metrics.jsonl   one MetricsRecord per line
    *.ckpt          checkpoints (phase boundaries, periodic, final, latest)
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Type

from . import config as env
from .__about__ import __version__
from .checkpoint import load_checkpoint
from .controller import ControllerConfig
from .corpus import ParallelCorpus, TaskSpec, load_tsv, load_vocab
from .decoding import DecodeConfig
from .errors import ConfigError, DataError, LabError, ParseError
from .seq2seq import Seq2SeqConfig, init_params
from .trainer import LATEST, EvalCadence, Phase, TrainResult, TrainSchedule, Trainer

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


def build_section(cls: Type, data: Any, section: str, **defaults):
    """Instantiate a config dataclass from a JSON object, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**{**defaults, **data})
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from None
    except ValueError as err:
        # bad enum values
        raise ConfigError(f"{section}: {err}") from None


def _jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class RunConfig:
    seed: int
    task: TaskSpec
    model: Seq2SeqConfig
    schedule: TrainSchedule
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    cadence: EvalCadence = field(default_factory=EvalCadence)
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    batch_size: int = 32
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if (self.model.src_vocab, self.model.tgt_vocab) != (self.task.src_vocab, self.task.tgt_vocab):
            raise ConfigError("model vocabulary sizes must match the task's")
        if self.model.max_src_len < self.task.max_len or self.model.max_tgt_len < self.task.max_len + 1:
            raise ConfigError("model length limits are shorter than the task's sentences")
        for path in (self.data_dir, self.out_dir):
            if not path:
                raise ConfigError("data_dir and out_dir must be non-empty")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = {
            "seed", "task", "splits", "model", "schedule", "controller",
            "decode", "eval", "batch_size", "data_dir", "out_dir",
        }
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        if "seed" not in data:
            raise ConfigError("seed is mandatory")
        seed = data["seed"]

        task = build_section(TaskSpec, data.get("task"), "task", seed=seed)
        splits = data.get("splits") or {}
        unknown = sorted(set(splits) - {"dev_fraction", "test_fraction"})
        if unknown:
            raise ConfigError(f"splits: unknown keys {unknown}")
        model = build_section(
            Seq2SeqConfig,
            data.get("model"),
            "model",
            src_vocab=task.src_vocab,
            tgt_vocab=task.tgt_vocab,
            seed=seed,
        )
        controller = build_section(ControllerConfig, data.get("controller"), "controller")

        schedule_data = dict(data.get("schedule") or {})
        if "controller" in schedule_data:
            raise ConfigError("schedule: give the controller as a top-level section")
        phases = schedule_data.pop("phases", None)
        if phases is None:
            schedule = TrainSchedule.default(controller)
            if schedule_data:
                schedule = build_section(
                    TrainSchedule,
                    schedule_data,
                    "schedule",
                    phases=schedule.phases,
                    total_steps=schedule.total_steps,
                    controller=controller,
                )
        else:
            if not isinstance(phases, list):
                raise ConfigError("schedule.phases must be a list")
            built = tuple(build_section(Phase, p, f"schedule.phases[{i}]") for i, p in enumerate(phases))
            schedule = build_section(TrainSchedule, schedule_data, "schedule", phases=built, controller=controller)

        decode = build_section(DecodeConfig, data.get("decode"), "decode", max_len=model.max_tgt_len)
        cadence = build_section(EvalCadence, data.get("eval"), "eval")
        try:
            return cls(
                seed=seed,
                task=task,
                model=model,
                schedule=schedule,
                decode=decode,
                cadence=cadence,
                dev_fraction=splits.get("dev_fraction", 0.1),
                test_fraction=splits.get("test_fraction", 0.1),
                batch_size=data.get("batch_size", 32),
                data_dir=data.get("data_dir", "data"),
                out_dir=data.get("out_dir", "runs/default"),
            )
        except TypeError as err:
            raise ConfigError(str(err)) from None

    def to_dict(self) -> Dict[str, Any]:
        schedule = _jsonable(self.schedule)
        controller = schedule.pop("controller")
        return {
            "seed": self.seed,
            "task": _jsonable(self.task),
            "splits": {"dev_fraction": self.dev_fraction, "test_fraction": self.test_fraction},
            "model": self.model.to_dict(),
            "schedule": schedule,
            "controller": controller,
            "decode": _jsonable(self.decode),
            "eval": _jsonable(self.cadence),
            "batch_size": self.batch_size,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
        }

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed model initialization and data order; the task data stays as configured."""
        return dataclasses.replace(self, seed=seed, model=dataclasses.replace(self.model, seed=seed))

    def split_path(self, split: str) -> str:
        return os.path.join(self.data_dir, f"{split}.tsv")

    @property
    def vocab_path(self) -> str:
        return os.path.join(self.data_dir, "vocab.json")


def load_run_config(path: str, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """Parse and fully validate a run config; flags beat DSD_OUT_DIR beats the file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fp:
        try:
            data = json.load(fp)
        except json.JSONDecodeError as err:
            raise ParseError(err.msg, path=path, line=err.lineno) from None
    run_config = RunConfig.from_dict(data)
    if seed is not None:
        run_config = run_config.with_seed(seed)
    out_dir = out_dir or env.DSD_OUT_DIR
    if out_dir:
        run_config = dataclasses.replace(run_config, out_dir=out_dir)
    return run_config


def write_json_atomic(path: str, data: Dict[str, Any]) -> None:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as fp:
        json.dump(data, fp, indent=2, sort_keys=True)
        fp.write("\n")
        fp.flush()
        os.fsync(fp.fileno())
    os.replace(tmp_path, path)


@dataclass(frozen=True)
class RunManifest:
    config: Dict[str, Any]
    version: str
    started_at: str
    command: str
    files: Dict[str, Any]

    @classmethod
    def create(cls, run_config: RunConfig, command: str, schedule: TrainSchedule) -> "RunManifest":
        boundaries = [f"phase{i}-step{p.start}.ckpt" for i, p in enumerate(schedule.phases) if p.start > 0]
        return cls(
            config={**run_config.to_dict(), "schedule_used": _jsonable(schedule)},
            version=__version__,
            started_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            command=command,
            files={
                "metrics": "metrics.jsonl",
                "status": "status.json",
                "checkpoints": boundaries + ["final.ckpt", LATEST],
                "decodes": [],
            },
        )

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        if os.path.exists(path):
            raise ConfigError(f"{path} already exists; use --resume or a fresh output directory")
        write_json_atomic(path, dataclasses.asdict(self))
        return path


class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class StatusWriter:
    """Keeps status.json beside the manifest current."""

    def __init__(self, out_dir: str) -> None:
        self.path = os.path.join(out_dir, "status.json")
        self.logger = logging.getLogger(__name__)

    def write(self, status: RunStatus, step: Optional[int] = None, error: Optional[str] = None, **extra) -> None:
        status = RunStatus(status)
        write_json_atomic(
            self.path,
            {
                "status": status.value,
                "step": step,
                "error": error,
                "updated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                **extra,
            },
        )
        self.logger.debug(f"** Status {status.value} at step {step}")


def read_status(out_dir: str) -> Dict[str, Any]:
    with open(os.path.join(out_dir, "status.json"), "r", encoding="utf-8") as fp:
        return json.load(fp)


def load_splits(run_config: RunConfig) -> Dict[str, ParallelCorpus]:
    """Read the generated TSVs with the vocabulary sizes the config declares."""
    missing = [run_config.split_path(s) for s in SPLITS if not os.path.exists(run_config.split_path(s))]
    if missing:
        raise DataError(f"corpus files missing: {missing}; run `generate` first")
    if os.path.exists(run_config.vocab_path):
        vocab = load_vocab(run_config.vocab_path)
        if (vocab.get("src_vocab"), vocab.get("tgt_vocab")) != (run_config.task.src_vocab, run_config.task.tgt_vocab):
            raise DataError(f"{run_config.vocab_path} does not match the configured vocabulary sizes")
    return {
        split: load_tsv(run_config.split_path(split), run_config.task.src_vocab, run_config.task.tgt_vocab)
        for split in SPLITS
    }


def execute_run(
    run_config: RunConfig,
    schedule: TrainSchedule,
    out_dir: str,
    *,
    resume: bool = False,
    command: str = "train",
    progress: bool = True,
) -> TrainResult:
    """Train one schedule into `out_dir`, keeping manifest and status current."""
    splits = load_splits(run_config)
    os.makedirs(out_dir, exist_ok=True)
    latest = os.path.join(out_dir, LATEST)
    resuming = resume and os.path.exists(latest)
    if resume and not resuming:
        log.warning(f"** No {LATEST} in {out_dir}; starting from scratch")
    if not resuming:
        RunManifest.create(run_config, command, schedule).write(out_dir)

    trainer = Trainer(
        init_params(run_config.model),
        splits["train"],
        schedule,
        batch_size=run_config.batch_size,
        seed=run_config.seed,
        dev=splits["dev"],
        cadence=run_config.cadence,
        decode_config=run_config.decode,
        out_dir=out_dir,
        progress=progress,
    )
    if resuming:
        trainer.restore(load_checkpoint(latest))

    status = StatusWriter(out_dir)
    status.write(RunStatus.RUNNING, step=trainer.step)
    try:
        result = trainer.run()
    except (LabError, OSError) as err:
        status.write(RunStatus.FAILED, step=trainer.step, error=str(err))
        raise
    status.write(
        RunStatus.COMPLETED,
        step=trainer.step,
        switch_step=result.switch_step,
        set_point=result.set_point,
    )
    log.info(f"** Run in {out_dir} completed at step {trainer.step}")
    return result


def sweep_dirs(out_dir: str, labels: List[str]) -> Dict[str, str]:
    return {label: os.path.join(out_dir, label) for label in labels}
