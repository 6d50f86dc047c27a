import math

import numpy as np
import pytest

from relcil.backbone import BackboneConfig, pretrain_base
from relcil.errors import ConfigError, ContractError
from relcil.relation import AlignmentConfig
from relcil.stream import StreamSpec, make_stream
from relcil.trainer import Optimizer, TrainConfig, lambda_at, run_stream, train_task


SMALL_STREAM = StreamSpec(total_classes=6, tasks=3, train_per_class=20, test_per_class=10, input_dim=8, base_classes=4, seed=3)
SMALL_NET = BackboneConfig(input_dim=8, width=8, layers=3, rank=2, pretrain_epochs=5)


def small_cfg(**kw):
    args = dict(epochs=3, batch_size=16, recal_samples=32, recal_epochs=2, seed=3)
    args.update(kw)
    return TrainConfig(**args)


def run_small(**kw):
    base, tasks = make_stream(SMALL_STREAM)
    return run_stream(base, tasks, SMALL_NET, small_cfg(**kw))


def pretrained(spec=SMALL_STREAM, net=SMALL_NET, seed=3):
    base, tasks = make_stream(spec)
    stream_classes = [c for t in tasks for c in t.labels]
    return pretrain_base(net, base.X, base.y, seed, stream_classes), tasks


# schedules ------------------------------------------------------------------


def test_lambda_schedule_examples():
    assert all(lambda_at("constant", 2.5, e, 7) == 2.5 for e in range(7))
    assert lambda_at("linear", 2.0, 2, 5) == 1.0
    assert lambda_at("cosine", 3.0, 0, 9) == 3.0
    assert lambda_at("cosine", 3.0, 8, 9) == pytest.approx(0.0, abs=1e-15)
    assert lambda_at("exponential", 1.0, 4, 5) == 2.0**-4
    assert lambda_at("linear", 1.0, 0, 1) == 1.0
    with pytest.raises(ContractError):
        lambda_at("constant", 1.0, 0, 0)
    with pytest.raises(ContractError):
        lambda_at("linear", 1.0, 5, 5)


@pytest.mark.parametrize("schedule", ["cosine", "exponential", "linear"])
def test_decaying_schedules_are_monotone(schedule):
    vals = [lambda_at(schedule, 1.0, e, 11) for e in range(11)]
    assert vals[0] == 1.0 and all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= 2.0**-4 + 1e-15


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig(alignment={"strategy": "p2p"}).alignment.strategy == "p2p"


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_zero_gradient_step_keeps_parameters(kind):
    p = np.linspace(-1, 1, 7)
    opt = Optimizer(kind, 7, 0.1)
    for _ in range(3):
        q = opt.step(p, np.zeros(7))
        assert np.array_equal(q, p)


# single task ----------------------------------------------------------------


def test_zero_epochs_only_adds_identity_adapter():
    bb, tasks = pretrained()
    before = bb.frozen_bytes(0)
    log = train_task(bb, tasks[0], small_cfg(epochs=0), 1)
    assert log == [] and bb.n_tasks == 1
    assert np.all(bb.adapters[0].B == 0) and bb.frozen_bytes(0) == before
    assert all(np.all(bb.heads[c] == 0) for c in tasks[0].labels)


def test_train_task_order_is_enforced():
    bb, tasks = pretrained()
    with pytest.raises(ContractError):
        train_task(bb, tasks[1], small_cfg(), 2)


def test_earlier_parameters_are_frozen():
    bb, tasks = pretrained()
    cfg = small_cfg()
    train_task(bb, tasks[0], cfg, 1)
    frozen = bb.frozen_bytes(1)
    heads = {c: bb.heads[c].tobytes() for c in tasks[0].labels}
    log = train_task(bb, tasks[1], cfg, 2)
    assert bb.frozen_bytes(1) == frozen
    assert {c: bb.heads[c].tobytes() for c in tasks[0].labels} == heads
    assert np.any(bb.adapters[1].B != 0)
    assert set(log[0]) == {"epoch", "lambda", "ce", "align", "total", "train_acc", "probe_relation_drift", "probe_feature_drift"}
    for row in log:
        assert abs(row["total"] - (row["ce"] + row["lambda"] * row["align"])) < 1e-12


def test_default_task_reaches_high_training_accuracy():
    spec = StreamSpec()
    net = BackboneConfig()
    bb, tasks = pretrained(spec, net, seed=0)
    log = train_task(bb, tasks[0], TrainConfig(), 1)
    assert len(log) == 20 and log[-1]["train_acc"] > 0.95


def test_lambda_schedule_reaches_the_log():
    bb, tasks = pretrained()
    log = train_task(bb, tasks[0], small_cfg(epochs=4, lam=2.0, lam_schedule="linear"), 1)
    np.testing.assert_allclose([r["lambda"] for r in log], [2.0, 4 / 3, 2 / 3, 0.0], atol=1e-15)


# full stream ----------------------------------------------------------------


def comparable(report):
    return {k: v for k, v in report.items() if k != "wall_clock_s"}


def test_run_is_deterministic():
    a, b = run_small(), run_small()
    assert comparable(a.report()) == comparable(b.report())
    assert a.backbone.frozen_bytes(3) == b.backbone.frozen_bytes(3)


def test_single_task_stream():
    spec = StreamSpec(total_classes=4, tasks=1, train_per_class=20, test_per_class=10, input_dim=8, base_classes=4, seed=1)
    base, tasks = make_stream(spec)
    result = run_stream(base, tasks, SMALL_NET, small_cfg())
    rep = result.report()
    assert len(rep["accuracy_matrix"]) == 1 and len(rep["accuracy_matrix"][0]) == 1
    assert rep["forgetting"] == [None]
    assert rep["A_last"] == rep["accuracy_matrix"][0][0]


def test_report_shape_and_evaluation_classes():
    result = run_small()
    rep = result.report()
    assert [len(r) for r in rep["accuracy_matrix"]] == [1, 2, 3]
    assert all(0.0 <= a <= 1.0 for row in rep["accuracy_matrix"] for a in row)
    # evaluation at task t only sees heads of classes seen so far
    assert [len(h) for h in result.head_history] == [2, 4, 6]
    assert [(d["probe_task"], d["model_task"]) for d in rep["drift"]] == [(1, 1), (1, 2), (2, 2), (1, 3), (2, 3), (3, 3)]
    assert all(d["mean_relation_drift"] == 0 for d in rep["drift"] if d["probe_task"] == d["model_task"])
    assert len(rep["loss_logs"]) == 3 and math.isfinite(rep["A_avg"])


def test_lambda_zero_matches_strategy_none():
    runs = [
        run_small(lam=0.0, alignment=AlignmentConfig(strategy=s))
        for s in ("eigen", "p2p", "b_eigen", "feature_all")
    ]
    none = run_small(alignment=AlignmentConfig(strategy="none"))
    for r in runs:
        assert r.accuracy.rows == none.accuracy.rows
        assert r.backbone.frozen_bytes(3) == none.backbone.frozen_bytes(3)
        for la, lb in zip(r.logs, none.logs):
            assert [x["ce"] for x in la] == [x["ce"] for x in lb]
