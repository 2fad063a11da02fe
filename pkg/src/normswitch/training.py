"""Deterministic training harness.

Runs are fully determined by an :class:`~normswitch.config.ExperimentConfig`:
parameter initialisation uses ``seed``, the sample order of epoch ``e``
uses ``default_rng([seed, e])``, and emulated devices are evaluated in a
fixed order. Because the epoch order does not depend on any carried RNG
state, resuming from a snapshot continues exactly like an uninterrupted run.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .analytics import RatioTrajectory, export_trajectory, fmt
from .config import ExperimentConfig, parse_config
from .data import ingest_dataset
from .errors import ConfigurationError, InputError, NumericError, UsageError
from .model import build_network
from .network import get_fixture
from .snapshot import Snapshot
from .switchable import HardRatio, RatioState, apply_hard, harden, hard_init

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")


# -- optimisation -------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd_momentum"
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "rmsprop"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    @classmethod
    def from_experiment(cls, cfg):
        return cls(cfg.optimizer, cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.rmsprop_rho, cfg.rmsprop_eps)


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "stepwise"
    lr0: float = 0.1
    milestones: tuple = (30, 60, 90)
    total_epochs: int = 100
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("stepwise", "cosine"):
            raise ConfigurationError(f"unknown schedule {self.kind!r}")
        if self.factor <= 0:
            raise ConfigurationError("stepwise factor must be positive")


def lr_at(schedule, epoch):
    """Learning rate in effect during ``epoch`` (0-based, may be fractional)."""
    if schedule.kind == "stepwise":
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.lr0 * schedule.factor ** passed
    return 0.5 * schedule.lr0 * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))


def optimizer_step(cfg, params, grads, state, lr):
    """Update ``params`` in place.

    ``params`` is a list of ``(name, array)``; ``grads`` maps names to
    gradients (missing entries count as zero); ``state`` holds per-name
    buffers and is updated in place. Weight decay is folded into the
    gradient of every parameter passed in.
    """
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        g = g + cfg.weight_decay * p
        if cfg.kind == "sgd_momentum":
            v = state.get(name)
            v = g if v is None else cfg.momentum * v + g
            state[name] = v
            p -= lr * v
        else:
            s = state.get(name)
            s = (1.0 - cfg.rho) * g * g if s is None else cfg.rho * s + (1.0 - cfg.rho) * g * g
            state[name] = s
            p -= lr * g / (np.sqrt(s) + cfg.eps)


# -- forward / backward -------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    correct: int
    grads: dict
    tape: list


def sharded_forward_backward(model, x, y, shard):
    """Loss and gradients of one batch split over emulated devices.

    Samples are split into ``shard.n_shards`` contiguous groups; BN
    statistics (including the BN member of switchable layers) are
    computed per group. Gradients are those of the mean loss over the
    whole batch, i.e. per-device gradients summed and divided by the
    total batch size.
    """
    n = len(x)
    shard.check(n)
    logits, tape = model.forward(x, shard, training=True)
    losses, dlogits = T.softmax_cross_entropy(logits, y)
    grads = model.backward(tape, dlogits / n)
    correct = int(np.sum(np.argmax(logits, axis=1) == y))
    return StepResult(float(np.mean(losses)), correct, grads, tape)


def estimate_bn_statistics(model, x, shard, k_batches=100):
    """Batch-average BN statistics over the first ``k_batches`` batches of ``x``.

    Every device shard of every batch contributes one set of moments.
    Returns the number of batches used.
    """
    layers = [layer for _, layer in model.bn_layers() if layer.bn_stats.mode == "batch_average"]
    if not layers:
        return 0
    if k_batches < 1:
        raise ConfigurationError("k_batches must be >= 1")
    b = shard.total
    n_batches = min(k_batches, len(x) // b)
    if n_batches < 1:
        raise ConfigurationError(f"need at least {b} samples to estimate BN statistics")
    for layer in layers:
        layer.bn_stats.reset()
    for i in range(n_batches):
        _, tape = model.forward(x[i * b:(i + 1) * b], shard, training=True)
        for name, m in model.bn_moments(tape).items():
            stats = model.norms[name].bn_stats
            if stats.mode == "batch_average":
                stats.accumulate(m)
    for layer in layers:
        if layer.bn_stats.batches_seen:
            layer.bn_stats.finalize()
    return n_batches


def evaluate(model, x, y, batch_size=256):
    """Mean loss and accuracy with inference statistics."""
    if len(x) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits, _ = model.forward(x[i:i + batch_size], training=False)
        losses, _ = T.softmax_cross_entropy(logits, y[i:i + batch_size])
        total += float(np.sum(losses))
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return total / len(x), correct / len(x)


# -- snapshots ----------------------------------------------------------------


def capture_snapshot(model, opt_state, epoch, cfg):
    arrays = {}
    for name, arr in model.named_parameters(trainable=False):
        arrays[name] = arr.copy()
    bn_meta = {}
    for name, layer in model.bn_layers():
        st = layer.bn_stats
        arrays[f"{name}.bn_mean"] = st.means.copy()
        arrays[f"{name}.bn_var"] = st.vars.copy()
        bn_meta[name] = {"batches_seen": st.batches_seen, "finalized": st.finalized}
    for name in sorted(opt_state):
        arrays[f"opt.{name}"] = opt_state[name].copy()
    hard = {}
    for name, layer in model.switchable_layers():
        if layer.state.hard is not None:
            hard[name] = [layer.state.hard.choice_mu, layer.state.hard.choice_sigma]
    meta = {
        "epoch": int(epoch),
        "seed": int(cfg.seed),
        "norm_choice": model.norm_choice,
        "config": cfg.to_text(),
        "hard": hard,
        "bn": bn_meta,
    }
    return Snapshot(arrays, meta)


def restore_snapshot(model, snap, restore_ratios=True):
    """Load parameters and statistics into ``model``; return (opt_state, epoch)."""
    if snap.meta.get("norm_choice") != model.norm_choice:
        raise UsageError(f"snapshot holds a {snap.meta.get('norm_choice')} model, not {model.norm_choice}")
    hard = snap.meta.get("hard", {})
    for name, layer in model.switchable_layers():
        if restore_ratios and name in hard:
            layer.layer.state = apply_hard(layer.state, HardRatio(*hard[name]))
        elif restore_ratios:
            layer.layer.state = RatioState(layer.state.omega, layer.state.tied)
    for name, arr in model.named_parameters(trainable=False):
        if name.endswith((".logits_mu", ".logits_sigma")) and not restore_ratios:
            continue
        if name not in snap.arrays:
            raise UsageError(f"snapshot is missing parameter {name}")
        if snap.arrays[name].shape != arr.shape:
            raise UsageError(f"snapshot parameter {name} has shape {snap.arrays[name].shape}, model expects {arr.shape}")
        arr[...] = snap.arrays[name]
    for name, layer in model.bn_layers():
        st = layer.bn_stats
        st.means = snap.arrays[f"{name}.bn_mean"].copy()
        st.vars = snap.arrays[f"{name}.bn_var"].copy()
        info = snap.meta.get("bn", {}).get(name, {})
        st.batches_seen = info.get("batches_seen", 0)
        st.finalized = info.get("finalized", False)
    opt_state = {k[4:]: v.copy() for k, v in snap.arrays.items() if k.startswith("opt.")}
    return opt_state, int(snap.meta["epoch"])


def snapshot_config(snap):
    return parse_config(snap.meta["config"], env={})


# -- runs ---------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: list
    trajectory: RatioTrajectory
    snapshot: Snapshot
    step_losses: list = field(default_factory=list)
    model: object = None


def make_model(cfg, dataset):
    if cfg.network == "mini_resnet":
        spec = get_fixture(
            "mini_resnet",
            widths=tuple(cfg.widths),
            blocks_per_stage=cfg.blocks_per_stage,
            input_shape=dataset.input_shape,
            num_classes=dataset.classes,
        )
    else:
        spec = get_fixture(cfg.network, input_shape=dataset.input_shape, num_classes=dataset.classes)
    return build_network(
        spec,
        cfg.norm_choice,
        omega=cfg.omega,
        gn_groups=cfg.gn_groups,
        eps=cfg.eps,
        sigma_aggregation=cfg.sigma_aggregation,
        bn_mode=cfg.bn_stats,
        bn_decay=cfg.bn_decay,
        seed=cfg.seed,
    )


def harden_model(model):
    """Replace every switchable layer's ratios by their hard (argmax) version."""
    layers = model.switchable_layers()
    if not layers:
        raise UsageError("model has no switchable normalization layers to harden")
    out = {}
    for name, layer in layers:
        h = harden(layer.state)
        layer.layer.state = apply_hard(layer.state, h)
        out[name] = h
    return out


def _apply_hard_init(model, cfg):
    source = Snapshot.load(cfg.hard_init_from)
    src_cfg = snapshot_config(source)
    src_model = make_model(src_cfg, _ShapeOnly(model.spec.input_shape, model.spec.num_classes))
    restore_snapshot(src_model, source)
    src_layers = dict(src_model.switchable_layers())
    for name, layer in model.switchable_layers():
        if name not in src_layers:
            raise UsageError(f"hard-init snapshot has no switchable layer {name}")
        h = harden(src_layers[name].state)
        if cfg.hard:
            layer.layer.state = apply_hard(RatioState(layer.state.omega, layer.state.tied), h)
        else:
            layer.layer.state = hard_init(layer.state.omega, h, layer.state.tied, cfg.hard_init_logit)


@dataclass
class _ShapeOnly:
    input_shape: tuple
    classes: int


def _record_ratios(model, traj, epoch):
    for _, layer in model.switchable_layers():
        st = layer.state
        traj.add(layer.meta.layer_id, epoch, layer.meta.rf, st.full(st.lambda_mu), st.full(st.lambda_sigma))


def _schedule(cfg):
    return LRSchedule(cfg.schedule, cfg.lr0, tuple(cfg.milestones), max(cfg.epochs, 1))


def lr_scale(cfg):
    """Linear learning-rate scaling by total batch size."""
    if cfg.lr_base_batch <= 0:
        return 1.0
    return cfg.shard.total / cfg.lr_base_batch


def train(cfg, resume=None, dataset=None, model=None, progress=None):
    """Train per ``cfg``; optionally continue from a snapshot ``resume``.

    Ratios are logged for every switchable layer at the end of each epoch
    (epochs are numbered from 1).
    """
    if not isinstance(cfg, ExperimentConfig):
        raise ConfigurationError("train() expects an ExperimentConfig")
    data = dataset if dataset is not None else ingest_dataset(cfg.dataset_source())
    if len(data.x_train) < cfg.shard.total:
        raise InputError(f"dataset has {len(data.x_train)} training samples, fewer than one batch of {cfg.shard.total}")
    if model is None:
        model = make_model(cfg, data)
        if cfg.hard_init_from:
            _apply_hard_init(model, cfg)
        elif cfg.hard:
            raise ConfigurationError("config key 'hard' needs 'hard_init_from' or a snapshot to harden")
    opt = OptimizerConfig.from_experiment(cfg)
    schedule = _schedule(cfg)
    opt_state = {}
    start = 0
    if resume is not None:
        opt_state, start = restore_snapshot(model, resume)
    shard = cfg.shard
    b = shard.total
    n_steps = len(data.x_train) // b
    scale = lr_scale(cfg)
    traj = RatioTrajectory()
    metrics = []
    step_losses = []
    for epoch in range(start, cfg.epochs):
        lr = lr_at(schedule, epoch) * scale
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data.x_train))
        loss_sum, correct = 0.0, 0
        for i in range(n_steps):
            idx = order[i * b:(i + 1) * b]
            step = sharded_forward_backward(model, data.x_train[idx], data.y_train[idx], shard)
            if cfg.bn_stats == "moving_average":
                for name, m in model.bn_moments(step.tape).items():
                    model.norms[name].bn_stats.update(m)
            step.tape = None
            optimizer_step(opt, model.named_parameters(trainable=True), step.grads, opt_state, lr)
            loss_sum += step.loss
            correct += step.correct
            step_losses.append(step.loss)
        _record_ratios(model, traj, epoch + 1)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": loss_sum / n_steps,
            "train_acc": correct / (n_steps * b),
            "test_loss": None,
            "test_acc": None,
        }
        last = epoch + 1 == cfg.epochs
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            if cfg.bn_stats == "batch_average":
                estimate_bn_statistics(model, data.x_train, shard, cfg.bn_k_batches)
            row["test_loss"], row["test_acc"] = evaluate(model, data.x_test, data.y_test)
        metrics.append(row)
        if progress is not None:
            progress(row)
    snap = capture_snapshot(model, opt_state, max(cfg.epochs, start), cfg)
    return RunResult(metrics, traj, snap, step_losses, model)


def harden_finetune(snapshot, cfg, dataset=None, progress=None):
    """Harden every switchable layer of ``snapshot`` and keep training.

    Parameters, BN statistics and optimizer state come from the snapshot;
    the hardened ratios stay frozen while training continues up to
    ``cfg.epochs``.
    """
    data = dataset if dataset is not None else ingest_dataset(cfg.dataset_source())
    if not any(k.endswith(".logits_mu") for k in snapshot.arrays):
        raise UsageError("snapshot contains no switchable normalization layers")
    model = make_model(cfg, data)
    opt_state, start = restore_snapshot(model, snapshot)
    harden_model(model)
    for key in [k for k in opt_state if k.endswith((".logits_mu", ".logits_sigma"))]:
        del opt_state[key]
    snap = capture_snapshot(model, opt_state, start, cfg)
    return train(cfg, resume=snap, dataset=data, model=model, progress=progress)


# -- output files -------------------------------------------------------------


def write_metrics(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow(["" if row[k] is None else (row[k] if k == "epoch" else fmt(row[k])) for k in METRICS_HEADER])


def save_run(result, cfg, out_dir=None):
    """Write metrics.csv, trajectory.csv, snapshot.bin and config.cfg."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(result.metrics, os.path.join(out_dir, "metrics.csv"))
    export_trajectory(result.trajectory, os.path.join(out_dir, "trajectory.csv"))
    result.snapshot.save(os.path.join(out_dir, "snapshot.bin"))
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(cfg.to_text())
    return out_dir
