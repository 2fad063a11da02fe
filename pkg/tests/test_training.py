import math

import numpy as np
import pytest

from normswitch.config import ExperimentConfig
from normswitch.data import ingest_dataset
from normswitch.errors import ConfigurationError, InputError, NumericError, UsageError
from normswitch.snapshot import Snapshot
from normswitch.switchable import HardRatio
from normswitch.training import (
    LRSchedule,
    OptimizerConfig,
    harden_finetune,
    lr_at,
    optimizer_step,
    save_run,
    train,
)

TINY = dict(
    resolution=8,
    train_samples=32,
    test_samples=16,
    widths=(4, 8, 8),
    blocks_per_stage=1,
    n_shards=2,
    per_shard=4,
    epochs=2,
    lr_base_batch=0,
    lr0=0.05,
    classes=4,
)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def test_lr_schedule_examples():
    step = LRSchedule("stepwise", 0.1, (30, 60, 90), 100)
    assert lr_at(step, 0) == 0.1
    assert math.isclose(lr_at(step, 45), 0.01, rel_tol=1e-15)
    assert math.isclose(lr_at(step, 95), 1e-4, rel_tol=1e-12)
    cos = LRSchedule("cosine", 0.1, total_epochs=100)
    assert lr_at(cos, 0) == 0.1
    assert abs(lr_at(cos, 50) - 0.05) <= 1e-15
    assert all(0.0 <= lr_at(cos, e) <= 0.1 for e in range(101))
    with pytest.raises(ConfigurationError):
        LRSchedule("linear")


def test_sgd_first_step():
    p = np.array([1.0])
    state = {}
    optimizer_step(OptimizerConfig("sgd_momentum", weight_decay=0.0), [("p", p)], {"p": np.array([1.0])}, state, 0.1)
    assert p[0] == pytest.approx(0.9, abs=1e-15)
    assert state["p"][0] == 1.0


def test_sgd_momentum_accumulates():
    p = np.array([0.0])
    state = {}
    cfg = OptimizerConfig("sgd_momentum", momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        optimizer_step(cfg, [("p", p)], {"p": np.array([1.0])}, state, 0.1)
    assert state["p"][0] == pytest.approx(1.9, abs=1e-15)
    assert p[0] == pytest.approx(-0.29, abs=1e-15)


def test_rmsprop_first_step():
    p = np.array([0.0])
    optimizer_step(OptimizerConfig("rmsprop", weight_decay=0.0), [("p", p)], {"p": np.array([1.0])}, {}, 0.01)
    assert p[0] == pytest.approx(-0.01 / (math.sqrt(0.1) + 1e-8), rel=1e-14)


def test_weight_decay_applies_to_every_parameter():
    params = [(n, np.array([2.0])) for n in ("conv0.weight", "norm0.gamma", "norm0.beta", "norm0.logits_mu")]
    optimizer_step(OptimizerConfig(weight_decay=1e-4, momentum=0.0), params, {}, {}, 1.0)
    for _, p in params:
        assert p[0] == pytest.approx(2.0 - 2e-4, abs=1e-15)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NumericError, match="norm3.gamma"):
        optimizer_step(OptimizerConfig(), [("norm3.gamma", np.ones(2))], {"norm3.gamma": np.array([1.0, np.nan])}, {}, 0.1)


def test_optimizer_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lr0=0.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(weight_decay=-1.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig("adam")


def test_training_is_deterministic(tmp_path):
    cfg = tiny()
    a, b = train(cfg), train(cfg)
    assert a.step_losses == b.step_losses
    save_run(a, cfg, tmp_path / "a")
    save_run(b, cfg, tmp_path / "b")
    for f in ("metrics.csv", "trajectory.csv", "snapshot.bin", "config.cfg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_trajectory_has_one_row_per_layer_and_epoch():
    r = train(tiny(epochs=3))
    layers = len(r.model.switchable_layers())
    assert len(r.trajectory.records) == 3 * layers
    assert r.trajectory.epochs() == [1, 2, 3]


def test_loss_decreases_on_separable_data():
    r = train(tiny(epochs=5, noise=0.0, lr0=0.1))
    first = np.mean(r.step_losses[:4])
    last = np.mean(r.step_losses[-4:])
    assert last < first


def test_subset_omega_logs_zero_column():
    r = train(tiny(omega=("LN", "BN"), epochs=1))
    for rec in r.trajectory.records:
        assert rec.lambda_mu[0] == 0.0 and rec.lambda_sigma[0] == 0.0


def test_tied_logs_identical_ratios():
    r = train(tiny(tied=True, epochs=1))
    for rec in r.trajectory.records:
        assert np.array_equal(rec.lambda_mu, rec.lambda_sigma)


def test_moving_average_mode_runs():
    r = train(tiny(bn_stats="moving_average", epochs=1))
    assert math.isfinite(r.metrics[-1]["test_loss"])


@pytest.mark.parametrize("norm", ["bn", "in", "ln", "gn"])
def test_uniform_normalizers_train(norm):
    r = train(tiny(norm=norm, gn_groups=2, epochs=1))
    assert len(r.trajectory.records) == 0
    assert math.isfinite(r.metrics[-1]["train_loss"])


def test_rmsprop_and_cosine_run():
    r = train(tiny(optimizer="rmsprop", schedule="cosine", lr0=0.001, epochs=2))
    assert r.metrics[1]["lr"] == pytest.approx(0.0005)


def test_snapshot_round_trip_is_byte_identical(tmp_path):
    r = train(tiny(epochs=1))
    raw = r.snapshot.to_bytes()
    assert Snapshot.from_bytes(raw).to_bytes() == raw
    r.snapshot.save(tmp_path / "s.bin")
    assert Snapshot.load(tmp_path / "s.bin").to_bytes() == raw


def test_resume_matches_uninterrupted_run():
    full = train(tiny(epochs=3))
    part = train(tiny(epochs=1))
    resumed = train(tiny(epochs=3), resume=Snapshot.from_bytes(part.snapshot.to_bytes()))
    assert part.step_losses + resumed.step_losses == full.step_losses
    assert resumed.snapshot.to_bytes() == full.snapshot.to_bytes()


def test_harden_finetune_freezes_argmax_ratios():
    soft = train(tiny(epochs=1))
    expected = {name: HardRatio(*[layer.state.omega[int(np.argmax(v))] for v in (layer.state.lambda_mu, layer.state.lambda_sigma)])
                for name, layer in soft.model.switchable_layers()}
    tuned = harden_finetune(soft.snapshot, tiny(epochs=2))
    assert tuned.metrics[0]["epoch"] == 2
    for name, layer in tuned.model.switchable_layers():
        assert layer.state.hard == expected[name]
        for lam in (layer.state.lambda_mu, layer.state.lambda_sigma):
            assert sorted(lam.tolist()) == [0.0, 0.0, 1.0]
    for rec in tuned.trajectory.records:
        assert sorted(rec.lambda_mu.tolist()) == [0.0, 0.0, 1.0]
    assert tuned.snapshot.meta["hard"]


def test_harden_finetune_requires_switchable_layers():
    bn = train(tiny(norm="bn", epochs=1))
    with pytest.raises(UsageError):
        harden_finetune(bn.snapshot, tiny(norm="bn", epochs=2))


def test_hard_init_from_snapshot(tmp_path):
    soft = train(tiny(epochs=1))
    path = tmp_path / "soft.bin"
    soft.snapshot.save(path)
    cfg = tiny(epochs=0, hard_init_from=str(path))
    r = train(cfg)
    for name, layer in r.model.switchable_layers():
        src = dict(soft.model.switchable_layers())[name].state
        choice = src.omega[int(np.argmax(src.lambda_mu))]
        expected = np.full(3, -10.0)
        expected[src.omega.index(choice)] = 10.0
        np.testing.assert_array_equal(layer.state.logits_mu, expected)
        assert layer.state.hard is None


def test_hard_flag_requires_source():
    with pytest.raises(ConfigurationError):
        train(tiny(hard=True))


def test_missing_dataset_is_input_error(tmp_path):
    with pytest.raises(InputError):
        train(tiny(dataset="cifar10_binary", dataset_path=str(tmp_path / "nope")))


def test_dataset_smaller_than_batch():
    with pytest.raises(InputError):
        train(tiny(train_samples=4))


def test_given_dataset_is_used():
    data = ingest_dataset(tiny().dataset_source())
    r = train(tiny(epochs=1), dataset=data)
    assert r.metrics[0]["train_acc"] >= 0.0
