import os
import statistics

import numpy as np
import pytest

import dual_skew_seq2seq.trainer as trainer_module
from dual_skew_seq2seq.checkpoint import load_checkpoint
from dual_skew_seq2seq.controller import ControllerConfig, simulate
from dual_skew_seq2seq.corpus import TaskKind, TaskSpec, generate_splits
from dual_skew_seq2seq.divergences import LossKind, LossOutput
from dual_skew_seq2seq.errors import ConfigError, NumericError, ParseError
from dual_skew_seq2seq.seq2seq import Seq2SeqConfig, init_params
from dual_skew_seq2seq.trainer import (
    LAST_GOOD,
    EvalCadence,
    MetricsRecord,
    Phase,
    SwitchRule,
    Trainer,
    TrainSchedule,
    epoch_seed,
    evaluate_hook,
    read_metrics,
    train,
)

EVERY_STEP = EvalCadence(log_every=1, eval_every=10_000, checkpoint_every=10_000)


def hybrid_schedule(switch=6, total=16, controller=None):
    return TrainSchedule(
        phases=(
            Phase(0, LossKind.XENT_SMOOTH, "adam", 0.01, smoothing=0.1),
            Phase(switch, LossKind.CDSD, "sgd", 0.1),
        ),
        total_steps=total,
        controller=controller or ControllerConfig(),
        switch_rule=SwitchRule.FIXED,
    )


def run(params, corpus, schedule, **kwargs):
    kwargs.setdefault("batch_size", 8)
    kwargs.setdefault("cadence", EVERY_STEP)
    kwargs.setdefault("progress", False)
    return train(params, corpus, schedule, **kwargs)


# -- schedules ---------------------------------------------------------------


def test_phase_validation():
    with pytest.raises(ConfigError):
        Phase(0, LossKind.DSD)
    with pytest.raises(ConfigError):
        Phase(0, LossKind.DSD, beta=1.5)
    with pytest.raises(ConfigError):
        Phase(0, LossKind.XENT, beta=0.5)
    with pytest.raises(ConfigError):
        Phase(0, optimizer="adagrad")
    with pytest.raises(ConfigError):
        Phase(0, lr=-1.0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        TrainSchedule(phases=(Phase(1),), total_steps=5)
    with pytest.raises(ConfigError):
        TrainSchedule(phases=(Phase(0), Phase(3), Phase(3)), total_steps=5)
    with pytest.raises(ConfigError):
        TrainSchedule(phases=(Phase(0), Phase(5)), total_steps=5)
    with pytest.raises(ConfigError):
        TrainSchedule(phases=(), total_steps=5)
    for alpha in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            TrainSchedule(phases=(Phase(0),), total_steps=5, alpha=alpha)
    assert TrainSchedule(phases=(Phase(0),), total_steps=5, alpha=0.0).alpha == 0.0


def test_default_schedule():
    schedule = TrainSchedule.default()
    assert [p.start for p in schedule.phases] == [0, 3000, 5000]
    assert [p.lr for p in schedule.phases] == [3e-4, 0.1, 0.05]
    assert schedule.phases[0].smoothing == 0.1
    assert schedule.switch_step == 3000
    assert schedule.total_steps == 6000
    assert [schedule.phase_at(s) for s in (0, 2999, 3000, 4999, 5000)] == [0, 0, 1, 1, 2]
    assert schedule.switch_rule is SwitchRule.PLATEAU
    assert schedule.patience == 3
    assert TrainSchedule.default(switch_rule=SwitchRule.FIXED).switch_rule is SwitchRule.FIXED


def test_with_switch_shifts_later_phases():
    moved = TrainSchedule.default().with_switch(1000)
    assert [p.start for p in moved.phases] == [0, 1000, 3000]
    assert moved.total_steps == 4000

    from_scratch = TrainSchedule.default().with_switch(0)
    assert [p.loss for p in from_scratch.phases] == [LossKind.CDSD, LossKind.CDSD]
    assert from_scratch.total_steps == 3000

    with pytest.raises(ConfigError):
        TrainSchedule(phases=(Phase(0),), total_steps=5).with_switch(2)


def test_optimizer_switch_only_control():
    control = TrainSchedule.default().as_optimizer_switch_only()
    assert all(p.loss is LossKind.XENT_SMOOTH for p in control.phases)
    assert [p.optimizer for p in control.phases] == ["adam", "sgd", "sgd"]
    assert [p.lr for p in control.phases] == [3e-4, 0.1, 0.05]


def test_epoch_seed_differs_per_epoch():
    assert epoch_seed(0, 0) == epoch_seed(0, 0)
    assert epoch_seed(0, 0) != epoch_seed(0, 1)


def test_plateau_rule_needs_dev(tiny_params, copy_corpus):
    schedule = TrainSchedule(phases=(Phase(0), Phase(5, LossKind.CDSD)), total_steps=8)
    assert schedule.switch_rule is SwitchRule.PLATEAU
    with pytest.raises(ConfigError):
        Trainer(tiny_params, copy_corpus, schedule)
    Trainer(tiny_params, copy_corpus, TrainSchedule(phases=(Phase(0),), total_steps=8))


# -- training runs -----------------------------------------------------------


def test_cross_entropy_smoke_run(tiny_params, copy_corpus):
    schedule = TrainSchedule(phases=(Phase(0, LossKind.XENT, "adam", 0.01),), total_steps=50)
    result = run(tiny_params, copy_corpus, schedule)
    assert [r.step for r in result.metrics] == list(range(1, 51))
    losses = [r.loss for r in result.metrics]
    assert statistics.mean(losses[-5:]) < statistics.mean(losses[:5])
    assert all(r.beta is None for r in result.metrics)
    assert result.switch_step is None


def test_dsd_at_beta_one_matches_divergence_sample(tiny_params, copy_corpus):
    schedule = TrainSchedule(
        phases=(Phase(0, LossKind.XENT_SMOOTH, smoothing=0.1), Phase(5, LossKind.DSD, "sgd", 0.1, beta=1.0)),
        total_steps=10,
    ).with_switch(0)
    result = run(tiny_params, copy_corpus, schedule)
    assert len(result.metrics) == 5
    for record in result.metrics:
        assert record.loss_kind == "dsd"
        assert abs(record.loss - record.u) < 1e-9


def test_controlled_phase_replays_through_simulate(tiny_params, copy_corpus, tmp_path):
    result = run(tiny_params, copy_corpus, hybrid_schedule(switch=10, total=20), out_dir=str(tmp_path))
    ml = [r for r in result.metrics if r.phase == 0]
    controlled = [r for r in result.metrics if r.phase == 1]
    assert len(ml) == 10 and len(controlled) == 10

    assert result.switch_step == 10
    assert result.set_point == pytest.approx(np.mean([r.loss for r in ml]), abs=1e-12)
    replay = simulate(ControllerConfig(set_point=result.set_point), [r.u for r in controlled])
    assert [r.beta for r in controlled] == [s.beta for s in replay]
    assert all(0.85 <= r.beta <= 0.95 for r in controlled)
    assert (tmp_path / "phase1-step10.ckpt").exists()


def test_configured_set_point_is_used(tiny_params, copy_corpus):
    schedule = hybrid_schedule(switch=4, total=8, controller=ControllerConfig(set_point=2.0))
    result = run(tiny_params, copy_corpus, schedule)
    assert result.set_point == 2.0


def test_optimizer_switch_only_run_keeps_schema(tiny_params, copy_corpus):
    schedule = hybrid_schedule(switch=5, total=10)
    control = run(tiny_params, copy_corpus, schedule.as_optimizer_switch_only())
    hybrid = run(tiny_params, copy_corpus, schedule)
    assert {r.loss_kind for r in control.metrics} == {"xent_smooth"}
    assert all(r.beta is None for r in control.metrics)
    assert [r.lr for r in control.metrics] == [r.lr for r in hybrid.metrics]
    assert set(MetricsRecord.__dataclass_fields__) == set(vars(hybrid.metrics[-1]))


def test_parameters_carry_over_the_switch(tiny_params, copy_corpus, tmp_path):
    cadence = EvalCadence(log_every=1, eval_every=10_000, checkpoint_every=6)
    run(tiny_params, copy_corpus, hybrid_schedule(switch=6, total=8), cadence=cadence, out_dir=str(tmp_path))
    before = load_checkpoint(str(tmp_path / "step6.ckpt"))
    boundary = load_checkpoint(str(tmp_path / "phase1-step6.ckpt"))
    assert boundary.step == 6
    for name in before.params.names():
        assert np.array_equal(before.params[name], boundary.params[name])


def test_runs_are_deterministic(tiny_params, copy_corpus):
    first = run(tiny_params, copy_corpus, hybrid_schedule(), seed=3)
    second = run(tiny_params, copy_corpus, hybrid_schedule(), seed=3)
    assert [r.to_json() for r in first.metrics] == [r.to_json() for r in second.metrics]
    other = run(tiny_params, copy_corpus, hybrid_schedule(), seed=4)
    assert [r.loss for r in other.metrics] != [r.loss for r in first.metrics]


def test_resume_reproduces_uninterrupted_run(tiny_params, copy_corpus, tmp_path):
    cadence = EvalCadence(log_every=1, eval_every=10_000, checkpoint_every=8)
    full = run(tiny_params, copy_corpus, hybrid_schedule(), cadence=cadence, out_dir=str(tmp_path / "full"), seed=5)

    resumed = Trainer(
        tiny_params, copy_corpus, hybrid_schedule(), batch_size=8, seed=5, cadence=cadence,
        out_dir=str(tmp_path / "resumed"), progress=False,
    )
    resumed.restore(load_checkpoint(str(tmp_path / "full" / "step8.ckpt")))
    tail = resumed.run()

    assert [r.to_json() for r in tail.metrics] == [r.to_json() for r in full.metrics[8:]]
    for name in full.checkpoint.params.names():
        assert np.array_equal(tail.checkpoint.params[name], full.checkpoint.params[name])
    assert tail.switch_step == full.switch_step == 6


def test_metrics_file_truncated_on_resume(tiny_params, copy_corpus, tmp_path):
    cadence = EvalCadence(log_every=1, eval_every=10_000, checkpoint_every=4)
    out = str(tmp_path)
    run(tiny_params, copy_corpus, hybrid_schedule(switch=4, total=8), cadence=cadence, out_dir=out)
    trainer = Trainer(
        tiny_params, copy_corpus, hybrid_schedule(switch=4, total=8), batch_size=8, cadence=cadence,
        out_dir=out, progress=False,
    )
    trainer.restore(load_checkpoint(os.path.join(out, "step4.ckpt")))
    trainer.run()
    assert [r.step for r in read_metrics(os.path.join(out, "metrics.jsonl"))] == list(range(1, 9))


def nan_loss_on_call(monkeypatch, n):
    calls = []
    real = trainer_module.loss_for_kind

    def flaky(*args, **kwargs):
        output = real(*args, **kwargs)
        calls.append(1)
        if len(calls) == n:
            return LossOutput(value=float("nan"), grad_logits=output.grad_logits, per_row=output.per_row)
        return output

    monkeypatch.setattr(trainer_module, "loss_for_kind", flaky)


def test_divergence_saves_last_good(tiny_params, copy_corpus, tmp_path, monkeypatch):
    nan_loss_on_call(monkeypatch, 4)
    trainer = Trainer(
        tiny_params, copy_corpus, hybrid_schedule(), batch_size=8, cadence=EVERY_STEP,
        out_dir=str(tmp_path), progress=False,
    )
    with pytest.raises(NumericError, match=r"\(step 3\)") as err:
        trainer.run()
    assert err.value.step == 3

    last_good = load_checkpoint(str(tmp_path / LAST_GOOD))
    assert last_good.step == 3
    for name in trainer.params.names():
        assert np.array_equal(last_good.params[name], trainer.params[name])
    assert len(read_metrics(str(tmp_path / "metrics.jsonl"))) == 3


def test_divergence_in_controlled_phase_rolls_back_controller(tiny_params, copy_corpus, tmp_path, monkeypatch):
    # switch at 6, so the 9th loss is the third cDSD step
    nan_loss_on_call(monkeypatch, 9)
    trainer = Trainer(
        tiny_params, copy_corpus, hybrid_schedule(switch=6, total=16), batch_size=8, cadence=EVERY_STEP,
        out_dir=str(tmp_path), progress=False,
    )
    with pytest.raises(NumericError, match=r"\(step 8\)"):
        trainer.run()

    last_good = load_checkpoint(str(tmp_path / LAST_GOOD))
    assert last_good.step == 8
    assert last_good.controller["t"] == 2
    assert trainer.controller.state.t == 2
    replay = simulate(
        ControllerConfig(set_point=trainer.set_point),
        [r.u for r in read_metrics(str(tmp_path / "metrics.jsonl")) if r.phase == 1],
    )
    assert last_good.controller["last_beta"] == replay[-1].beta


def test_plateau_rule_switches_early(tiny_params, copy_corpus):
    schedule = TrainSchedule(
        phases=(Phase(0, LossKind.XENT, "adam", 0.0), Phase(100, LossKind.DSD, "sgd", 0.1, beta=1.0)),
        total_steps=110,
        switch_rule=SwitchRule.PLATEAU,
        patience=1,
    )
    cadence = EvalCadence(log_every=1, eval_every=2, checkpoint_every=10_000, dev_limit=4)
    result = run(tiny_params, copy_corpus, schedule, dev=copy_corpus, cadence=cadence)
    assert result.switch_step == 4
    assert result.checkpoint.step == 14
    assert result.metrics[-1].loss_kind == "dsd"
    assert [r.dev_bleu is not None for r in result.metrics[:4]] == [False, True, False, True]


def test_default_plateau_rule_follows_dev_loss(tiny_params, copy_corpus, monkeypatch):
    # evals at steps 2, 4, 6, 8, 10; the last three never beat 2.0
    dev_losses = iter([3.0, 2.0, 2.5, 2.4, 2.6])
    seen = []

    def scripted(*args, **kwargs):
        seen.append(1)
        return next(dev_losses)

    monkeypatch.setattr(trainer_module, "dev_loss", scripted)
    schedule = TrainSchedule(
        phases=(Phase(0, LossKind.XENT, "adam", 0.01), Phase(100, LossKind.DSD, "sgd", 0.1, beta=1.0)),
        total_steps=104,
    )
    cadence = EvalCadence(log_every=1, eval_every=2, checkpoint_every=10_000, dev_limit=2)
    result = run(tiny_params, copy_corpus, schedule, dev=copy_corpus, cadence=cadence)
    assert result.switch_step == 10
    assert result.checkpoint.step == 14
    assert len(seen) == 5
    assert {r.loss_kind for r in result.metrics if r.step > 10} == {"dsd"}


def test_plateau_switch_never_passes_the_nominal_step(tiny_params, copy_corpus, monkeypatch):
    monkeypatch.setattr(trainer_module, "dev_loss", lambda *args, **kwargs: 1.0)
    schedule = TrainSchedule(
        phases=(Phase(0, LossKind.XENT, "adam", 0.01), Phase(6, LossKind.DSD, "sgd", 0.1, beta=1.0)),
        total_steps=10,
        patience=10,
    )
    cadence = EvalCadence(log_every=1, eval_every=2, checkpoint_every=10_000, dev_limit=2)
    result = run(tiny_params, copy_corpus, schedule, dev=copy_corpus, cadence=cadence)
    assert result.switch_step == 6
    assert result.checkpoint.step == 10


def test_evaluate_hook_scores_dev(tiny_params, copy_corpus):
    report = evaluate_hook(tiny_params, copy_corpus, trainer_module.DecodeConfig(max_len=6), limit=5)
    assert 0.0 <= report.score <= 100.0
    assert report.ref_length == sum(len(t) for t in copy_corpus.targets[:5])


def test_read_metrics_reports_bad_line(tmp_path):
    path = tmp_path / "metrics.jsonl"
    good = MetricsRecord(1, 0, "xent", 1.0, 1.0, 0.5, None, 0.1, 2.0).to_json()
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        read_metrics(str(path))
    assert err.value.line == 2


# -- end to end --------------------------------------------------------------

GOLDEN_SCHEDULE = TrainSchedule.default(switch_rule=SwitchRule.FIXED)



def golden_task(seed):
    spec = TaskSpec(kind=TaskKind.SYNONYM_NOISE, src_vocab=32, tgt_vocab=32, fanout=2, noise=0.05, size=8000, seed=seed)
    return generate_splits(spec, dev_fraction=0.05, test_fraction=0.05)


def golden_run(seed, schedule=None):
    splits = golden_task(seed)
    params = init_params(Seq2SeqConfig(src_vocab=32, tgt_vocab=32, seed=seed))
    cadence = EvalCadence(log_every=1, eval_every=3000, checkpoint_every=10_000, dev_limit=200)
    return train(
        params, splits["train"], schedule or GOLDEN_SCHEDULE, batch_size=32, seed=seed,
        dev=splits["dev"], cadence=cadence, progress=False,
    )


@pytest.mark.slow
def test_golden_run_cross_entropy_rises_after_switch():
    result = golden_run(seed=0)
    xent = {r.step: r.xent for r in result.metrics}
    before = statistics.mean(xent[s] for s in range(2801, 3001))
    after = statistics.mean(xent[s] for s in range(3001, 3201))
    assert after > before
    assert {r.loss_kind for r in result.metrics if r.step > 3000} == {"cdsd"}


@pytest.mark.slow
def test_golden_control_run_shares_schema():
    control = golden_run(seed=0, schedule=GOLDEN_SCHEDULE.as_optimizer_switch_only())
    assert len(control.metrics) == 6000
    assert {r.loss_kind for r in control.metrics} == {"xent_smooth"}


@pytest.mark.slow
def test_controlled_phase_improves_dev_bleu_across_seeds():
    gains = []
    for seed in range(5):
        result = golden_run(seed)
        bleu = {r.step: r.dev_bleu for r in result.metrics if r.dev_bleu is not None}
        gains.append(bleu[6000] - bleu[3000])
    assert sum(g >= 0 for g in gains) >= 3
    assert statistics.median(gains) > 0
