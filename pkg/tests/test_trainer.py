import dataclasses
import math

import numpy as np
import pytest

from rspinn import trainer
from rspinn.pdes import UnsupportedModeError
from rspinn.sampling import ConfigError
from rspinn.trainer import TrainConfig, _Plateau, relative_l2, run_suite, train


def tiny(**kw):
    base = dict(problem="fp_isotropic", dim=3, hidden=(6,), epochs=6, batch_size=8, K_train=4, K_test=4,
                test_set_size=20, eval_interval=2, sigma_x=0.05)
    base.update(kw)
    return TrainConfig(**base)


def strip_time(rec):
    return [dataclasses.replace(r, wall_time_s=0.0) for r in rec.rows]


def test_zero_epochs_gives_initial_row_only():
    rec = train(tiny(epochs=0))
    assert len(rec.rows) == 1 and rec.rows[0].epoch == 0
    assert math.isnan(rec.rows[0].train_loss)


def test_rows_are_ordered_and_lr_follows_decay():
    cfg = tiny(epochs=7, eval_interval=3)
    rec = train(cfg)
    epochs = [r.epoch for r in rec.rows]
    assert epochs == [0, 3, 6, 7]
    assert all(b.wall_time_s >= a.wall_time_s for a, b in zip(rec.rows, rec.rows[1:]))
    for r in rec.rows:
        assert r.lr == pytest.approx(cfg.base_lr * cfg.decay_coefficient**r.epoch, rel=1e-15)


def test_hybrid_switches_exactly_at_transition():
    rec = train(tiny(mode="hybrid", transition_epoch=3, epochs=6, eval_interval=1))
    assert rec.transitions == [(0, "biased"), (3, "unbiased1")]
    assert [rec.mode_at(e) for e in range(6)] == ["biased"] * 3 + ["unbiased1"] * 3
    assert [r.mode for r in rec.rows[1:]] == ["biased"] * 3 + ["unbiased1"] * 3


def test_hybrid_post_mode_defaults():
    rec = train(tiny(problem="hjb_quadratic", mode="hybrid", transition_epoch=1, epochs=2))
    assert rec.transitions[-1] == (1, "unbiased2")


def test_same_seed_same_record():
    a, b = train(tiny(), 3), train(tiny(), 3)
    assert strip_time(a) == strip_time(b)
    assert strip_time(a) != strip_time(train(tiny(), 4))


def test_test_set_computed_once(monkeypatch):
    cfg = tiny()
    problem = cfg.build_problem()
    calls = []
    orig = problem.exact

    def counting(x, t=None):
        calls.append((x.copy(), None if t is None else t.copy()))
        return orig(x, t)

    problem.exact = counting
    train(cfg, problem=problem)
    assert len(calls) == 1


def test_divergence_returns_partial_record(monkeypatch):
    real = trainer.residual_loss
    count = {"n": 0}

    def flaky(*a, **k):
        count["n"] += 1
        lv = real(*a, **k)
        if count["n"] == 4:
            lv.loss = float("nan")
        return lv

    monkeypatch.setattr(trainer, "residual_loss", flaky)
    rec = train(tiny(epochs=10, eval_interval=2))
    assert rec.status == "diverged" and "epoch 3" in rec.message
    assert [r.epoch for r in rec.rows] == [0, 2]


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(mode="hybrid", transition_epoch=6, epochs=6)
    with pytest.raises(ConfigError):
        tiny(batch_size=0)
    with pytest.raises(ConfigError):
        tiny(mode="hybrid")
    with pytest.raises(ConfigError, match="lr_schedule"):
        tiny(lr_schedule="cosine")
    with pytest.raises(UnsupportedModeError, match="unsupported nonlinearity"):
        train(tiny(problem="sine_gordon", mode="unbiased2"))
    with pytest.raises(UnsupportedModeError):
        train(tiny(problem="sine_gordon", mode="hybrid", transition_epoch=2, post_mode="unbiased2"))


def test_relative_l2_examples():
    u = np.array([1.0, -2.0, 3.0])
    assert relative_l2(u, u) == 0.0
    assert relative_l2(np.zeros(3), u) == 1.0
    assert relative_l2(1.01 * u, u) == pytest.approx(0.01, rel=1e-12)


def test_relative_l2_zero_exact_falls_back(caplog):
    assert relative_l2(np.array([3.0, 4.0]), np.zeros(2)) == 5.0
    assert "absolute" in caplog.text


def test_run_suite_aggregates():
    single = run_suite(tiny(), seeds=[1], workers=1)
    assert single.std == 0.0 and single.mean == single.records[0].final_error
    a = run_suite(tiny(), seeds=[1, 2, 3], workers=1)
    b = run_suite(tiny(), seeds=[3, 1, 2], workers=1)
    assert a.mean == pytest.approx(b.mean, rel=1e-15) and a.std == pytest.approx(b.std, rel=1e-12)
    assert a.std == pytest.approx(np.std(a.final_errors))


def test_worker_pool_matches_serial():
    serial = run_suite(tiny(), seeds=[1, 2], workers=1)
    pooled = run_suite(tiny(), seeds=[1, 2], workers=2)
    assert serial.final_errors == pooled.final_errors


def test_worker_env(monkeypatch):
    monkeypatch.setenv(trainer.WORKERS_ENV, "3")
    assert trainer.worker_count() == 3
    monkeypatch.setenv(trainer.WORKERS_ENV, "0")
    with pytest.raises(ConfigError):
        trainer.worker_count()
    monkeypatch.delenv(trainer.WORKERS_ENV)
    assert trainer.worker_count() >= 1


def test_plateau_detector():
    p = _Plateau(window=5, tol=1e-3)
    assert not any(p.update(10.0 / (i + 1)) for i in range(10))
    p = _Plateau(window=5, tol=1e-3)
    assert [p.update(1.0) for _ in range(10)][-1]


def test_auto_transition_switches_on_flat_loss(monkeypatch):
    rec = train(tiny(mode="hybrid", auto_transition=True, plateau_window=2, plateau_tol=10.0, epochs=8))
    assert rec.transitions[0] == (0, "biased") and rec.transitions[1] == (4, "unbiased1")


def test_epoch_cost_grows_with_group_count():
    cost = {}
    for mode in ("biased", "unbiased1", "unbiased2"):
        rec = train(tiny(problem="hjb_quadratic", dim=4, mode=mode, epochs=8, batch_size=64, K_train=32,
                         hidden=(16, 16), eval_interval=8))
        cost[mode] = np.median(rec.epoch_seconds[mode])
    assert cost["unbiased2"] >= cost["unbiased1"] >= cost["biased"]


def test_linear_schedule_ends_at_zero_lr():
    rec = train(tiny(lr_schedule="linear", epochs=4, eval_interval=2))
    lrs = [r.lr for r in rec.rows]
    assert lrs[0] == pytest.approx(1e-3) and lrs[-1] == 0.0
