"""Command-line surface: generate | train | eval | gradcheck | controller-sim.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error,
3 gradient check failure.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

from . import config
from .__about__ import __version__
from .checkpoint import load_checkpoint
from .controller import ControllerConfig, simulate
from .corpus import generate_splits, load_tsv, save_tsv, save_vocab
from .decoding import DecodeConfig, DecodeMode, decode_corpus
from .divergences import LossKind
from .errors import ConfigError, DataError, DimensionError, LabError, NumericError, ParseError
from .gradcheck_suite import GradCheck, run_suite
from .metrics import corpus_bleu, sentence_scores, sign_test
from .runs import RunConfig, build_section, execute_run, load_run_config, write_json_atomic
from .trainer import SwitchRule, TrainSchedule

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3

BETA_SWEEP = (0.0, 0.5, 1.0)
BEAM_SWEEP = (1, 3, 5, 25, 100)


def exit_code(err: BaseException) -> int:
    if isinstance(err, (ConfigError, DataError, DimensionError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- generate ------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config, seed=args.seed)
    data_dir = args.out or run_config.data_dir
    splits = generate_splits(run_config.task, run_config.dev_fraction, run_config.test_fraction)
    os.makedirs(data_dir, exist_ok=True)
    for name, corpus in splits.items():
        save_tsv(corpus, os.path.join(data_dir, f"{name}.tsv"))
    save_vocab(run_config.task, os.path.join(data_dir, "vocab.json"))
    log.info(
        f"** Wrote {', '.join(f'{n}={len(c)}' for n, c in splits.items())} pairs "
        f"of {run_config.task.kind.value} to {data_dir}"
    )
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def beta_sweep_schedules(schedule: TrainSchedule) -> Dict[str, TrainSchedule]:
    """Fixed-beta DSD runs at 0, 0.5 and 1 plus the controlled run."""
    runs = {}
    for beta in BETA_SWEEP:
        phases = [schedule.phases[0]] + [
            dataclasses.replace(p, loss=LossKind.DSD, beta=beta) for p in schedule.phases[1:]
        ]
        runs[f"beta{beta:g}"] = dataclasses.replace(schedule, phases=tuple(phases))
    phases = [schedule.phases[0]] + [
        dataclasses.replace(p, loss=LossKind.CDSD, beta=None) for p in schedule.phases[1:]
    ]
    runs["cdsd"] = dataclasses.replace(schedule, phases=tuple(phases))
    return runs


def training_runs(args: argparse.Namespace, run_config: RunConfig) -> Dict[str, TrainSchedule]:
    schedule = run_config.schedule
    if args.osf:
        schedule = schedule.as_optimizer_switch_only()
    if args.beta_sweep and args.switch_sweep:
        raise ConfigError("--beta-sweep and --switch-sweep are exclusive")
    if len(schedule.phases) < 2 and (args.beta_sweep or args.switch_sweep):
        raise ConfigError("sweeps need a schedule with a switching point")
    if args.beta_sweep:
        return beta_sweep_schedules(schedule)
    if args.switch_sweep:
        # each member switches exactly at its listed step
        fixed = dataclasses.replace(schedule, switch_rule=SwitchRule.FIXED)
        return {f"switch{step}": fixed.with_switch(step) for step in args.switch_sweep}
    return {"": schedule}


def cmd_train(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    runs = training_runs(args, run_config)
    command = " ".join(sys.argv)

    def one(label: str, schedule: TrainSchedule):
        out_dir = os.path.join(run_config.out_dir, label) if label else run_config.out_dir
        result = execute_run(
            run_config,
            schedule,
            out_dir,
            resume=args.resume,
            command=command,
            progress=not args.parallel,
        )
        bleus = [r.dev_bleu for r in result.metrics if r.dev_bleu is not None]
        return {
            "run": label or "main",
            "out_dir": out_dir,
            "switch_step": result.switch_step,
            "set_point": result.set_point,
            "final_dev_bleu": bleus[-1] if bleus else None,
        }

    if args.parallel and len(runs) > 1:
        rows: List[Optional[Dict]] = [None] * len(runs)
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.MAX_CONCURRENT_THREADS) as executor:
            future_to_index = {
                executor.submit(one, label, schedule): index for index, (label, schedule) in enumerate(runs.items())
            }
            for future in concurrent.futures.as_completed(future_to_index):
                rows[future_to_index[future]] = future.result()
    else:
        rows = [one(label, schedule) for label, schedule in runs.items()]

    if len(runs) > 1:
        os.makedirs(run_config.out_dir, exist_ok=True)
        write_json_atomic(os.path.join(run_config.out_dir, "sweep.json"), {"runs": rows})
    print(json.dumps(rows if len(rows) > 1 else rows[0], indent=2))
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def read_decodes(path: str) -> List[Tuple[int, ...]]:
    """One hypothesis per line as space-separated token ids."""
    if not os.path.exists(path):
        raise DataError(f"decode file not found: {path}")
    decodes = []
    with open(path, "r", encoding="utf-8") as fp:
        for line_number, line in enumerate(fp, start=1):
            try:
                decodes.append(tuple(int(t) for t in line.split()))
            except ValueError:
                raise ParseError("non-integer token", path=path, line=line_number) from None
    return decodes


def write_decodes(path: str, decodes: Sequence[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for tokens in decodes:
            fp.write(" ".join(map(str, tokens)) + "\n")


def decode_configs(args: argparse.Namespace, base: DecodeConfig) -> List[DecodeConfig]:
    if args.beam_sweep:
        return [
            DecodeConfig.beam(width, base.max_len, base.length_penalty) for width in BEAM_SWEEP
        ]
    configs = []
    for mode in args.modes or [base.mode.value]:
        mode = DecodeMode(mode)
        if mode is DecodeMode.GREEDY:
            configs.append(DecodeConfig(max_len=base.max_len))
        else:
            width = args.beam if args.beam is not None else (base.beam_width if base.mode is DecodeMode.BEAM else 5)
            configs.append(DecodeConfig.beam(width, base.max_len, base.length_penalty))
    return configs


def cmd_eval(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config, seed=args.seed)
    try:
        configs = decode_configs(args, run_config.decode)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.params.config
    if (model.src_vocab, model.tgt_vocab) != (run_config.task.src_vocab, run_config.task.tgt_vocab):
        raise DataError(
            f"checkpoint vocabulary {model.src_vocab}/{model.tgt_vocab} does not match "
            f"the corpus {run_config.task.src_vocab}/{run_config.task.tgt_vocab}"
        )
    corpus = load_tsv(run_config.split_path(args.split), model.src_vocab, model.tgt_vocab)
    compare = read_decodes(args.compare) if args.compare else None
    if compare is not None and len(compare) != len(corpus):
        raise DataError(f"{args.compare} has {len(compare)} lines for {len(corpus)} sentences")

    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    os.makedirs(out_dir, exist_ok=True)
    references = corpus.targets
    rows = []
    first_outputs = None
    for decode_config in configs:
        hypotheses = decode_corpus(ckpt.params, corpus.sources, decode_config)
        outputs = [h.output for h in hypotheses]
        first_outputs = first_outputs or outputs
        report = corpus_bleu(outputs, references)
        write_decodes(os.path.join(out_dir, f"{args.split}.{decode_config.label}.txt"), outputs)
        row = {"decode": decode_config.label, "beam": decode_config.beam_width, **report.to_dict()}
        rows.append(row)
        log.info(f"** {decode_config.label}: BLEU {report.score:.2f} on {len(corpus)} {args.split} sentences")

    result: Dict = {"checkpoint": args.checkpoint, "split": args.split, "reports": rows}
    if compare is not None:
        test = sign_test(sentence_scores(first_outputs, references), sentence_scores(compare, references))
        result["sign_test"] = {"against": args.compare, "system": rows[0]["decode"], **test.to_dict()}
    name = "beam_sweep.json" if args.beam_sweep else "report.json"
    write_json_atomic(os.path.join(out_dir, name), result)
    print(json.dumps(result, indent=2))
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------


def cmd_gradcheck(args: argparse.Namespace, checks: Optional[Sequence[GradCheck]] = None) -> int:
    report = run_suite(checks, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    if not report.passed:
        log.error("** Gradient check failed")
        return EXIT_GRADCHECK
    return EXIT_OK


# -- controller-sim ------------------------------------------------------------


def read_u_csv(path: str) -> List[float]:
    """Divergence samples, one per row in the last column; a header row is allowed."""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    values = []
    with open(path, "r", encoding="utf-8", newline="") as fp:
        for line_number, row in enumerate(csv.reader(fp), start=1):
            if not row or not "".join(row).strip():
                continue
            cell = row[-1].strip()
            try:
                value = float(cell)
            except ValueError:
                if line_number == 1 and not values:
                    continue
                raise ParseError(f"not a number: {cell!r}", path=path, line=line_number) from None
            if not math.isfinite(value):
                raise ParseError(f"non-finite value {cell!r}", path=path, line=line_number)
            values.append(value)
    return values


def controller_config(args: argparse.Namespace) -> ControllerConfig:
    section = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fp:
            try:
                data = json.load(fp)
            except json.JSONDecodeError as err:
                raise ParseError(err.msg, path=args.config, line=err.lineno) from None
        section = data.get("controller", data) if isinstance(data, dict) else data
    ctrl = build_section(ControllerConfig, section, "controller")
    if args.set_point is not None:
        ctrl = ctrl.with_set_point(args.set_point)
    if ctrl.set_point is None:
        raise ConfigError("controller-sim needs a set point (config or --set-point)")
    return ctrl


def write_trajectory(fp: TextIO, steps) -> None:
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["t", "u", "e", "beta"])
    for step in steps:
        writer.writerow([step.t, repr(step.u), repr(step.error), repr(step.beta)])


def cmd_controller_sim(args: argparse.Namespace) -> int:
    ctrl = controller_config(args)
    steps = simulate(ctrl, read_u_csv(args.input))
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fp:
            write_trajectory(fp, steps)
    else:
        write_trajectory(sys.stdout, steps)
    return EXIT_OK


# -- entry ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dual-skew-seq2seq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--out", help="output directory (overrides config and DSD_OUT_DIR)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("generate", help="write train/dev/test TSVs and vocab.json")
    common(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="run the training schedule")
    common(p)
    p.add_argument("--beta-sweep", action="store_true", help="DSD at beta 0, 0.5, 1 plus cDSD")
    p.add_argument("--switch-sweep", type=_int_list, metavar="S1,S2,...", help="one run per switching step")
    p.add_argument("--osf", action="store_true", help="keep the ML loss, switch only the optimizer")
    p.add_argument("--resume", action="store_true", help="continue from latest.ckpt")
    p.add_argument("--parallel", action="store_true", help="run sweep members concurrently")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="decode a split and score it")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], help="greedy,beam")
    p.add_argument("--beam", type=int, help="beam width for beam mode")
    p.add_argument("--beam-sweep", action="store_true", help="beam widths 1, 3, 5, 25, 100")
    p.add_argument("--compare", metavar="DECODES", help="sign test against another decode file")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("controller-sim", help="replay u(t) through the beta controller")
    p.add_argument("--input", required=True, help="CSV of u values")
    p.add_argument("--output", help="CSV to write (default stdout)")
    p.add_argument("--config", help="JSON with a controller section")
    p.add_argument("--set-point", type=float)
    p.set_defaults(handler=cmd_controller_sim)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=config.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except NumericError as err:
        log.error(f"** Numeric failure: {err}", exc_info=config.FULL_LOGGING)
        return EXIT_RUNTIME
    except (LabError, OSError) as err:
        log.error(f"** {args.command} failed due to {err}", exc_info=config.FULL_LOGGING)
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
