"""Optimizer, schedule, evaluation, the training loop, and sweeps."""

import csv
import io
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_mlp
from virlab.attacks import AttackFamily, AttackSpec
from virlab.config import OptimConfig, resolve_config
from virlab.data import Dataset
from virlab.errors import ConfigError, NumericAbort
from virlab.tensor import Tensor
from virlab.training import (EvalReport, MetricsLog, MetricsRow,
                             condition_names, evaluate, lr_at, mix_seed,
                             sgd_step, sweep, train, write_confusions)

PGD_EVAL = {"family": "PGD", "epsilon": 0.5, "step_size": 0.125,
            "iterations": 5, "loss_mode": "CE", "seed": 1234}


def tiny_config(extra=()):
    """Desk profile shrunk to a couple of seconds of work."""
    base = [
        ("epochs", 2),
        ("eval_every", 2),
        ("optimizer.milestones", []),
        ("dataset.dim", 4),
        ("dataset.per_class_n", 25),
        ("dataset.eval_per_class_n", 25),
        ("attack_train.iterations", 3),
        ("model.hidden", [12]),
        ("attack_eval", [dict(PGD_EVAL)]),
    ]
    return resolve_config(overrides=base + list(extra))


# -- seeds and optimizer ---------------------------------------------------------


def test_mix_seed_spreads_and_repeats():
    assert mix_seed(0, 1, 2) == mix_seed(0, 1, 2)
    assert mix_seed(0, 1, 2) != mix_seed(0, 2, 1)
    assert mix_seed(1) != mix_seed(2)
    seen = {mix_seed(s, e, b) for s in range(4) for e in range(8)
            for b in range(8)}
    assert len(seen) == 4 * 8 * 8
    assert all(0 <= v < 2**64 for v in seen)


def test_sgd_step_momentum_arithmetic():
    p = Tensor([1.0])
    p.grad = np.array([0.0])
    velocity = {"w": np.array([1.0])}
    sgd_step({"w": p}, lr=0.1, momentum=0.9, weight_decay=0.0,
             velocity=velocity)
    assert p.data[0] == 1.0 - 0.09
    assert velocity["w"][0] == 0.9


def test_sgd_step_weight_decay_folds_into_gradient():
    p = Tensor([2.0])
    p.grad = np.array([0.5])
    velocity = {}
    sgd_step({"w": p}, lr=0.1, momentum=0.9, weight_decay=0.01,
             velocity=velocity)
    # first step: velocity is just the decayed gradient
    assert velocity["w"][0] == 0.5 + 0.01 * 2.0
    assert p.data[0] == 2.0 - 0.1 * (0.5 + 0.02)


def test_sgd_step_zero_momentum_never_accumulates():
    p = Tensor([0.0])
    velocity = {}
    for g in (1.0, 1.0):
        p.grad = np.array([g])
        sgd_step({"w": p}, lr=1.0, momentum=0.0, weight_decay=0.0,
                 velocity=velocity)
        assert velocity["w"][0] == 1.0


def test_sgd_step_requires_gradients():
    p = Tensor([1.0])
    with pytest.raises(RuntimeError, match="'hidden_w'"):
        sgd_step({"hidden_w": p}, 0.1, 0.9, 0.0, {})


def test_lr_schedule_steps_at_milestones():
    optim = OptimConfig(base_lr=0.01, momentum=0.9, weight_decay=0.0,
                        milestones=(75, 90), decay_factor=10.0)
    assert lr_at(1, optim) == 0.01
    assert lr_at(74, optim) == 0.01
    assert lr_at(75, optim) == pytest.approx(0.001, rel=1e-12)
    assert lr_at(80, optim) == pytest.approx(0.001, rel=1e-12)
    assert lr_at(95, optim) == pytest.approx(0.0001, rel=1e-12)
    # also accepts anything carrying an .optimizer
    assert lr_at(80, SimpleNamespace(optimizer=optim)) == lr_at(80, optim)
    with pytest.raises(ConfigError):
        lr_at(0, optim)


# -- evaluation ------------------------------------------------------------------


def test_condition_names_dedupe():
    pgd = AttackSpec(AttackFamily.PGD, epsilon=0.5, step_size=0.1)
    fgsm = AttackSpec(AttackFamily.FGSM, epsilon=0.5)
    names = condition_names([pgd, fgsm, pgd, pgd])
    assert names == ["pgd", "fgsm", "pgd_2", "pgd_3"]
    assert condition_names([]) == []


def test_eval_report_mean_robust_accuracy():
    report = EvalReport(0.9, {}, {}, np.ones(2))
    assert report.mean_robust_accuracy is None
    report = EvalReport(0.9, {"pgd": 0.5, "fgsm": 0.7}, {}, np.ones(2))
    assert report.mean_robust_accuracy == pytest.approx(0.6)


def test_evaluate_constant_model(rng):
    model = make_mlp((4, 3))
    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    x = rng.standard_normal((30, 4))
    y = np.repeat([0, 1, 2], 10)
    ds = Dataset(x, y)
    report = evaluate(model, ds, [])
    # zero logits predict class 0 everywhere (argmax tie -> lowest index)
    assert report.clean_accuracy == pytest.approx(1 / 3)
    np.testing.assert_allclose(report.per_class_accuracy, [1.0, 0.0, 0.0])
    conf = report.confusions["clean"]
    assert conf.shape == (3, 3) and conf.sum() == 30
    np.testing.assert_array_equal(conf[:, 0], [10, 10, 10])
    assert report.robust_accuracy == {}


def test_evaluate_attack_conditions(rng):
    model = make_mlp((4, 8, 3), seed=1)
    x = rng.standard_normal((24, 4))
    y = rng.integers(0, 3, size=24)
    ds = Dataset(x, y)
    pgd = AttackSpec(AttackFamily.PGD, epsilon=0.3, step_size=0.1,
                     iterations=3, seed=7)
    report = evaluate(model, ds, [pgd, pgd])
    assert set(report.robust_accuracy) == {"pgd", "pgd_2"}
    assert set(report.confusions) == {"clean", "pgd", "pgd_2"}
    # identical specs, same seed: identical outcomes
    assert report.robust_accuracy["pgd"] == report.robust_accuracy["pgd_2"]
    for name, acc in report.robust_accuracy.items():
        assert 0.0 <= acc <= 1.0
        assert acc == pytest.approx(
            np.trace(report.confusions[name]) / 24)


def test_evaluate_rejects_bad_inputs(rng):
    model = make_mlp((4, 2))
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int)), [])
    x = rng.standard_normal((6, 4))
    with pytest.raises(ConfigError, match="classes"):
        evaluate(model, Dataset(x, np.array([0, 1, 2, 0, 1, 2])), [])


# -- metrics log -----------------------------------------------------------------


def metrics_fixture():
    log = MetricsLog(attack_names=["pgd", "fgsm"], num_classes=2)
    log.rows = [
        MetricsRow(1, 0.01, 1.5, 0.5, {"pgd": None, "fgsm": None},
                   [0.5, 0.5], [10.0, 10.0]),
        MetricsRow(2, 0.01, 1.0, 0.75, {"pgd": 0.5, "fgsm": 0.625},
                   [0.8, 0.7], [9.5, 11.25]),
    ]
    log.final_epoch = 2
    log.best_epoch = 2
    return log


def test_metrics_csv_schema():
    log = metrics_fixture()
    buf = io.StringIO()
    log.write_csv(buf)
    lines = list(csv.reader(io.StringIO(buf.getvalue())))
    assert lines[0] == ["row_kind", "epoch", "lr", "train_loss", "clean_acc",
                        "robust_acc_pgd", "robust_acc_fgsm",
                        "acc_class_0", "acc_class_1",
                        "weight_sum_class_0", "weight_sum_class_1"]
    kinds = [r[0] for r in lines[1:]]
    assert kinds == ["epoch", "epoch", "final", "best"]
    # epochs without a robust eval leave those cells empty
    assert lines[1][5] == "" and lines[1][6] == ""
    assert float(lines[2][5]) == 0.5
    # final/best replay the matching epoch row verbatim
    assert lines[3][1:] == lines[2][1:] == lines[4][1:]


def test_write_confusions(tmp_path):
    report = EvalReport(
        1.0, {"pgd": 0.5},
        {"clean": np.array([[3, 0], [0, 3]]), "pgd": np.array([[2, 1], [2, 1]])},
        np.ones(2))
    write_confusions(report, str(tmp_path))
    text = (tmp_path / "confusion_pgd.csv").read_text()
    assert text == "2,1\n2,1\n"
    assert (tmp_path / "confusion_clean.csv").read_text() == "3,0\n0,3\n"


# -- training loop ---------------------------------------------------------------


def test_train_learns_a_separable_problem():
    config = tiny_config([
        ("epochs", 6),
        ("eval_every", 6),
        ("objective.family", "AT"),
        ("objective.weight_scheme.family", "UNIFORM"),
        ("dataset.num_classes", 2),
        ("dataset.variances", [1.0, 1.0]),
        ("dataset.separation", 8.0),
        ("dataset.per_class_n", 40),
        ("dataset.eval_per_class_n", 40),
        ("model.hidden", [16]),
    ])
    model, log = train(config)
    assert len(log.rows) == 6
    assert log.rows[-1].train_loss < log.rows[0].train_loss
    _, eval_set = config.dataset.load()
    report = evaluate(model, eval_set, list(config.attack_eval))
    assert report.clean_accuracy > 0.9
    assert report.robust_accuracy["pgd"] > 0.75
    # robust eval ran only where scheduled
    assert log.rows[0].robust_accuracy["pgd"] is None
    assert log.rows[-1].robust_accuracy["pgd"] is not None
    assert log.best_epoch == 6 and log.final_epoch == 6


def test_burn_in_weight_sums_match_class_counts(tmp_path):
    # default burn_in_epoch (18) covers both epochs: weights are exactly 1.0
    config = tiny_config()
    out = tmp_path / "run"
    _, log = train(config, out_dir=str(out))
    for row in log.rows:
        assert row.weight_sums == [25.0, 25.0, 25.0]
    with open(out / "weights.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 75
    assert all(r["weight"] == "1.0" for r in rows)
    assert all(r["s_v"] == "" and r["s_d"] == "" for r in rows)
    # every sample logged exactly once per epoch
    for epoch in ("1", "2"):
        idxs = sorted(int(r["sample_index"]) for r in rows
                      if r["epoch"] == epoch)
        assert idxs == list(range(75))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_exploding_run_aborts_with_position():
    config = tiny_config([("epochs", 3), ("optimizer.base_lr", 1e155)])
    with pytest.raises(NumericAbort, match=r"epoch \d+, batch \d+"):
        train(config)


@pytest.mark.filterwarnings("ignore:overflow encountered")
@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_explosion_surfacing_in_eval_still_aborts():
    # The last step of the last epoch can push parameters non-finite after
    # every batch loss was already checked; the divergence then shows up in
    # the epoch's evaluation forward and must map to the same abort.
    config = resolve_config(overrides=[
        ("epochs", 2), ("eval_every", 2), ("optimizer.milestones", []),
        ("dataset.dim", 4), ("dataset.per_class_n", 10),
        ("dataset.eval_per_class_n", 25),
        ("attack_train.iterations", 1), ("model.hidden", [8]),
        ("optimizer.base_lr", 1e155),
        ("objective.weight_scheme.burn_in_epoch", 0),
    ])
    with pytest.raises(NumericAbort, match=r"during evaluation at epoch \d+"):
        train(config)


def test_identical_runs_write_identical_artifacts(tmp_path):
    extra = [("objective.weight_scheme.burn_in_epoch", 0)]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        train(tiny_config(extra), out_dir=str(out))
        outs.append(out)
    for fname in ("metrics.csv", "weights.csv", "checkpoint.ckpt",
                  "confusion_clean.csv", "confusion_pgd.csv"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, f"{fname} differs between identical runs"
    # and the weighted run actually produced non-uniform weights
    with open(outs[0] / "weights.csv", newline="") as fh:
        weights = {r["weight"] for r in csv.DictReader(fh)}
    assert len(weights) > 1


def test_different_seed_changes_the_run(tmp_path):
    a = train(tiny_config(), out_dir=str(tmp_path / "a"))[1]
    b = train(tiny_config([("seed", 1), ("dataset.seed", 1)]),
              out_dir=str(tmp_path / "b"))[1]
    assert a.rows[-1].train_loss != b.rows[-1].train_loss


# -- sweeps ----------------------------------------------------------------------


def sweep_config():
    return tiny_config([
        ("epochs", 1),
        ("eval_every", 1),
        ("dataset.per_class_n", 15),
        ("dataset.eval_per_class_n", 15),
        ("attack_train.iterations", 2),
        ("attack_eval", [dict(PGD_EVAL, iterations=2)]),
        ("objective.weight_scheme.burn_in_epoch", 0),
    ])


def test_sweep_single_point_default_grid(tmp_path):
    rows = sweep(sweep_config(), out_dir=str(tmp_path))
    assert len(rows) == 1
    row = rows[0]
    assert (row["alpha"], row["gamma"], row["beta"]) == (7.0, 10.0, 0.007)
    assert row["status"] == "ok" and row["error"] == ""
    assert 0.0 <= row["clean_acc"] <= 1.0
    assert 0.0 <= row["robust_acc_pgd"] <= 1.0
    assert (tmp_path / "run_a7p0_g10p0_b0p007" / "metrics.csv").exists()
    with open(tmp_path / "sweep.csv", newline="") as fh:
        parsed = list(csv.DictReader(fh))
    assert len(parsed) == 1
    assert float(parsed[0]["clean_acc"]) == row["clean_acc"]


def test_sweep_grid_and_failure_rows(tmp_path):
    rows = sweep(sweep_config(), betas=[0.007, -1.0, 1.6],
                 out_dir=str(tmp_path))
    assert [r["beta"] for r in rows] == [0.007, -1.0, 1.6]
    assert [r["status"] for r in rows] == ["ok", "failed", "ok"]
    bad = rows[1]
    assert "beta" in bad["error"] and bad["clean_acc"] is None
    with open(tmp_path / "sweep.csv", newline="") as fh:
        parsed = list(csv.DictReader(fh))
    assert parsed[1]["status"] == "failed"
    assert parsed[1]["clean_acc"] == ""
    assert parsed[1]["error"].startswith("ConfigError")
