import json
import os

import pytest

import dual_skew_seq2seq.config as env
from dual_skew_seq2seq.controller import ControllerConfig
from dual_skew_seq2seq.corpus import TaskKind, generate_splits, save_tsv, save_vocab
from dual_skew_seq2seq.divergences import Aggregation, LossKind
from dual_skew_seq2seq.errors import ConfigError, DataError, ParseError
from dual_skew_seq2seq.runs import (
    RunConfig,
    RunManifest,
    RunStatus,
    StatusWriter,
    execute_run,
    load_run_config,
    load_splits,
    read_status,
)
from dual_skew_seq2seq.trainer import TrainSchedule


@pytest.fixture(autouse=True)
def no_env_out_dir(monkeypatch):
    monkeypatch.setattr(env, "DSD_OUT_DIR", None)


def tiny_run_dict(tmp_path):
    return {
        "seed": 0,
        "task": {"kind": "copy", "src_vocab": 8, "tgt_vocab": 8, "min_len": 2, "max_len": 4, "size": 24},
        "splits": {"dev_fraction": 0.25, "test_fraction": 0.25},
        "model": {"emb_dim": 4, "hidden_dim": 6, "attn_dim": 5, "max_src_len": 8, "max_tgt_len": 8},
        "schedule": {
            "phases": [
                {"start": 0, "loss": "xent_smooth", "optimizer": "adam", "lr": 0.01, "smoothing": 0.1},
                {"start": 6, "loss": "cdsd", "optimizer": "sgd", "lr": 0.1},
            ],
            "total_steps": 10,
        },
        "eval": {"log_every": 1, "eval_every": 5, "checkpoint_every": 5, "dev_limit": 3},
        "batch_size": 8,
        "data_dir": str(tmp_path / "data"),
        "out_dir": str(tmp_path / "runs"),
    }


def write_config(tmp_path, data):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def generated(tmp_path):
    run_config = RunConfig.from_dict(tiny_run_dict(tmp_path))
    os.makedirs(run_config.data_dir, exist_ok=True)
    for name, corpus in generate_splits(run_config.task, run_config.dev_fraction, run_config.test_fraction).items():
        save_tsv(corpus, run_config.split_path(name))
    save_vocab(run_config.task, run_config.vocab_path)
    return run_config


def test_minimal_config_uses_defaults():
    run_config = RunConfig.from_dict({"seed": 7})
    assert run_config.task.seed == 7
    assert run_config.model.seed == 7
    assert run_config.schedule == TrainSchedule.default()
    assert run_config.decode.max_len == run_config.model.max_tgt_len
    assert run_config.dev_fraction == 0.1


def test_schedule_options_without_phases_keep_default_phases():
    run_config = RunConfig.from_dict({"seed": 0, "schedule": {"patience": 5}, "controller": {"set_point": 3.0}})
    assert [p.start for p in run_config.schedule.phases] == [0, 3000, 5000]
    assert run_config.schedule.patience == 5
    assert run_config.schedule.controller == ControllerConfig(set_point=3.0)


def test_config_sections_are_parsed(tmp_path):
    run_config = RunConfig.from_dict(tiny_run_dict(tmp_path))
    assert run_config.task.kind is TaskKind.COPY
    assert [p.loss for p in run_config.schedule.phases] == [LossKind.XENT_SMOOTH, LossKind.CDSD]
    assert run_config.cadence.dev_limit == 3
    assert run_config.batch_size == 8


def test_schedule_aggregation_option(tmp_path):
    data = tiny_run_dict(tmp_path)
    data["schedule"]["aggregation"] = "sum_per_sentence"
    run_config = RunConfig.from_dict(data)
    assert run_config.schedule.aggregation is Aggregation.SUM_PER_SENTENCE
    assert RunConfig.from_dict(tiny_run_dict(tmp_path)).schedule.aggregation is Aggregation.MEAN_PER_TOKEN


def test_round_trip(tmp_path):
    run_config = RunConfig.from_dict(tiny_run_dict(tmp_path))
    assert RunConfig.from_dict(json.loads(json.dumps(run_config.to_dict()))) == run_config


@pytest.mark.parametrize(
    "patch",
    [
        {"seed": None},
        {"seed": "zero"},
        {"colour": "blue"},
        {"task": {"kind": "translate"}},
        {"task": {"vocab": 8}},
        {"model": {"src_vocab": 12}},
        {"model": {"max_tgt_len": 4}},
        {"schedule": {"phases": {"start": 0}}},
        {"schedule": {"phases": [{"start": 0, "loss": "dsd"}], "total_steps": 4}},
        {"splits": {"train_fraction": 0.5}},
        {"decode": {"mode": "beam", "beam_width": 0}},
        {"controller": {"beta_min": 0.9, "beta_max": 0.8}},
        {"schedule": {"aggregation": "median"}},
    ],
)
def test_invalid_configs(tmp_path, patch):
    data = tiny_run_dict(tmp_path)
    for key, value in patch.items():
        if value is None:
            data.pop(key)
        else:
            data[key] = value
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_with_seed_reseeds_model_only(tmp_path):
    run_config = RunConfig.from_dict(tiny_run_dict(tmp_path)).with_seed(9)
    assert run_config.seed == 9
    assert run_config.model.seed == 9
    assert run_config.task.seed == 0


def test_load_run_config_out_dir_precedence(tmp_path, monkeypatch):
    path = write_config(tmp_path, tiny_run_dict(tmp_path))
    assert load_run_config(path).out_dir == str(tmp_path / "runs")
    monkeypatch.setattr(env, "DSD_OUT_DIR", str(tmp_path / "from_env"))
    assert load_run_config(path).out_dir == str(tmp_path / "from_env")
    assert load_run_config(path, out_dir=str(tmp_path / "flag")).out_dir == str(tmp_path / "flag")


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 0,\n  "task": }', encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_run_config(str(bad))
    assert err.value.line == 2


def test_manifest_written_once(tmp_path):
    run_config = RunConfig.from_dict(tiny_run_dict(tmp_path))
    manifest = RunManifest.create(run_config, "train --config run.json", run_config.schedule)
    assert "phase1-step6.ckpt" in manifest.files["checkpoints"]
    manifest.write(str(tmp_path))
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["config"]["seed"] == 0
    assert data["command"] == "train --config run.json"
    with pytest.raises(ConfigError):
        manifest.write(str(tmp_path))


def test_status_writer(tmp_path):
    writer = StatusWriter(str(tmp_path))
    writer.write(RunStatus.RUNNING, step=0)
    assert read_status(str(tmp_path))["status"] == "running"
    writer.write("failed", step=3, error="boom")
    status = read_status(str(tmp_path))
    assert (status["status"], status["step"], status["error"]) == ("failed", 3, "boom")


def test_load_splits(tmp_path):
    with pytest.raises(DataError):
        load_splits(RunConfig.from_dict(tiny_run_dict(tmp_path)))
    run_config = generated(tmp_path)
    splits = load_splits(run_config)
    assert [len(splits[s]) for s in ("train", "dev", "test")] == [24, 6, 6]


def test_load_splits_rejects_foreign_vocabulary(tmp_path):
    run_config = generated(tmp_path)
    vocab = json.loads(open(run_config.vocab_path).read())
    vocab["src_vocab"] = 30
    with open(run_config.vocab_path, "w") as fp:
        json.dump(vocab, fp)
    with pytest.raises(DataError):
        load_splits(run_config)


def test_execute_run_and_resume(tmp_path):
    run_config = generated(tmp_path)
    out_dir = run_config.out_dir
    result = execute_run(run_config, run_config.schedule, out_dir, progress=False)
    assert result.switch_step == 6
    status = read_status(out_dir)
    assert status["status"] == "completed"
    assert status["step"] == 10
    assert status["switch_step"] == 6
    for name in ("manifest.json", "metrics.jsonl", "final.ckpt", "latest.ckpt", "phase1-step6.ckpt", "step5.ckpt"):
        assert os.path.exists(os.path.join(out_dir, name)), name

    again = execute_run(run_config, run_config.schedule, out_dir, resume=True, progress=False)
    assert again.checkpoint.step == 10
    for name in result.checkpoint.params.names():
        assert (again.checkpoint.params[name] == result.checkpoint.params[name]).all()


def test_execute_run_refuses_existing_manifest(tmp_path):
    run_config = generated(tmp_path)
    execute_run(run_config, run_config.schedule, run_config.out_dir, progress=False)
    with pytest.raises(ConfigError):
        execute_run(run_config, run_config.schedule, run_config.out_dir, progress=False)
