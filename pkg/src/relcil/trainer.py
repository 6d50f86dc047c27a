"""Per-task training with relation alignment and the outer class-incremental loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, pretrain_base
from .errors import ConfigError, ContractError, NumericalError
from .metrics import AccuracyMatrix, forgetting, summarize
from .numerics import rng_stream
from .objectives import PrevCache, TaskObjective, fit_class_stats, recalibrate_classifier
from .relation import AlignmentConfig, RelationDiagnostics, relation_batch
from .stream import dataset_hash

LAMBDA_SCHEDULES = ("constant", "cosine", "exponential", "linear")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 5e-3
    lr_schedule: str = "cosine"
    lam: float = 1.0
    lam_schedule: str = "constant"
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    recalibrate: bool = True
    recal_samples: int = 256
    recal_epochs: int = 5
    recal_lr: float = 1e-2
    probe_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.alignment, dict):
            self.alignment = AlignmentConfig(**self.alignment)
        if self.epochs < 0 or self.batch_size < 1 or self.probe_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size, train.probe_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.lam_schedule not in LAMBDA_SCHEDULES:
            raise ConfigError(f"train.lam_schedule must be one of {LAMBDA_SCHEDULES}")
        if self.lam < 0:
            raise ConfigError("train.lam must be >= 0")


def lambda_at(schedule, lam, epoch, total):
    """Alignment weight for ``epoch`` in ``0..total-1``; decaying schedules end at (near) 0."""
    if total < 1:
        raise ContractError("schedule length must be >= 1")
    if not 0 <= epoch < total:
        raise ContractError(f"epoch {epoch} outside 0..{total - 1}")
    if schedule == "constant" or total == 1:
        return float(lam)
    frac = epoch / (total - 1)
    if schedule == "cosine":
        return lam * 0.5 * (1.0 + math.cos(math.pi * frac))
    if schedule == "exponential":
        return lam * 2.0 ** (-4.0 * frac)
    if schedule == "linear":
        return lam * (1.0 - frac)
    raise ContractError(f"unknown lambda schedule {schedule!r}")


class Optimizer:
    """Adam or plain SGD over a flat parameter vector; state is per task."""

    def __init__(self, kind, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = np.zeros(n) if kind == "adam" else None
        self.v = np.zeros(n) if kind == "adam" else None

    def step(self, params, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        if self.kind == "sgd":
            return params - lr * grad
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.step_count)
        vhat = self.v / (1 - self.beta2**self.step_count)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def _accuracy(backbone, X, y, horizon, classes):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(backbone.predict(X, horizon, classes) == y))


def probe_drift(backbone, X, h_ref, h_cur, phi, layers):
    """Mean relation and final-feature drift of ``X`` between two horizons."""
    z_ref = backbone.forward_batch(X, h_ref).z
    z_cur = backbone.forward_batch(X, h_cur).z
    R_ref, _ = relation_batch(z_ref, phi, layers)
    R_cur, _ = relation_batch(z_cur, phi, layers)
    rel = np.sqrt(np.sum((R_cur - R_ref) ** 2, axis=(1, 2)))
    feat = np.linalg.norm(z_cur[:, -1] - z_ref[:, -1], axis=1)
    return float(rel.mean()), float(feat.mean())


def train_task(backbone: Backbone, task, cfg: TrainConfig, t: int, diag=None):
    """Add adapter ``t`` and fit it plus the task's heads; returns the epoch log."""
    if backbone.n_tasks != t - 1:
        raise ContractError(f"train_task({t}) needs tasks 1..{t - 1} trained, backbone has {backbone.n_tasks}")
    align = cfg.alignment
    layers = align.layers(backbone.config.layers)
    backbone.add_task_adapter(t)
    backbone.add_classes(task.labels)
    backbone.trainable_classes = tuple(sorted(task.labels))
    X, y = task.train_X, task.train_y
    n = len(y)
    prev = PrevCache(backbone, X, t, align) if align.strategy != "none" else None
    probe_X, _ = task.probe(cfg.probe_size)

    opt = Optimizer(cfg.optimizer, backbone.n_trainable(), cfg.lr)
    rng = rng_stream(cfg.seed, "batch", t)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        lam = lambda_at(cfg.lam_schedule, cfg.lam, epoch, cfg.epochs)
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            obj = TaskObjective(backbone, X[idx], y[idx], align, lam, prev.subset(idx) if prev else None, diag)
            try:
                br, g, _ = obj.evaluate()
            except NumericalError as exc:
                raise NumericalError(f"task {t} step {step}: {exc}", stage=exc.stage) from exc
            lr = cfg.lr
            if cfg.lr_schedule == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            backbone.set_params(opt.step(backbone.get_params(), g, lr))
            sums += len(idx) * np.array([br.ce, br.align, br.total])
            step += 1
        ce, al, tot = sums / n
        rel, feat = probe_drift(backbone, probe_X, t - 1, t, align.phi, layers)
        log.append(
            {
                "epoch": epoch,
                "lambda": lam,
                "ce": ce,
                "align": al,
                "total": tot,
                "train_acc": _accuracy(backbone, X, y, t, backbone.trainable_classes),
                "probe_relation_drift": rel,
                "probe_feature_drift": feat,
            }
        )
    return log


@dataclass
class RunResult:
    """Everything a run produces; ``report()`` gives the JSON-ready record."""

    accuracy: AccuracyMatrix
    logs: list
    drift: list
    dataset_hash: str
    backbone: Backbone
    head_history: list  # heads dict after each task (post recalibration)
    diagnostics: dict
    wall_clock: float

    def report(self, config_echo=None):
        summ = summarize(self.accuracy)
        return {
            "config": config_echo,
            "accuracy_matrix": self.accuracy.rows,
            "A_i": summ["A_i"],
            "A_last": summ["A_last"],
            "A_avg": summ["A_avg"],
            "forgetting": forgetting(self.accuracy.errors()),
            "loss_logs": self.logs,
            "drift": self.drift,
            "dataset_hash": self.dataset_hash,
            "diagnostics": self.diagnostics,
            "seed": self.backbone.seed,
            "wall_clock_s": self.wall_clock,
        }


def run_stream(base, tasks, bcfg: BackboneConfig, cfg: TrainConfig, backbone=None) -> RunResult:
    """Train over ``tasks`` in order, filling one accuracy-matrix row per task."""
    t0 = time.perf_counter()
    stream_classes = [c for task in tasks for c in task.labels]
    if len(set(stream_classes)) != len(stream_classes):
        raise ConfigError("task label sets are not disjoint")
    if backbone is None:
        backbone = pretrain_base(bcfg, base.X, base.y, cfg.seed, stream_classes)
    align = cfg.alignment
    layers = align.layers(bcfg.layers)
    diag = RelationDiagnostics()
    acc = AccuracyMatrix(len(tasks))
    stats, logs, drift, heads = {}, [], [], []
    probes = [task.probe(cfg.probe_size)[0] for task in tasks]
    seen = []
    for t, task in enumerate(tasks, start=1):
        logs.append(train_task(backbone, task, cfg, t, diag))
        seen += list(task.labels)
        Z = backbone.forward_batch(task.train_X, t).z[:, -1]
        for c in task.labels:
            stats[c] = fit_class_stats(Z[task.train_y == c], c)
        if cfg.recalibrate:
            recalibrate_classifier(
                backbone,
                stats,
                cfg.recal_samples,
                cfg.recal_epochs,
                cfg.recal_lr,
                cfg.batch_size,
                rng_stream(cfg.seed, "pseudo", t),
            )
        classes = sorted(seen)
        for j in range(1, t + 1):
            tj = tasks[j - 1]
            acc.set(t, j, _accuracy(backbone, tj.test_X, tj.test_y, t, classes))
        for s in range(1, t + 1):
            rel, feat = probe_drift(backbone, probes[s - 1], s, t, align.phi, layers)
            drift.append(
                {
                    "probe_task": s,
                    "model_task": t,
                    "sample_count": len(probes[s - 1]),
                    "mean_relation_drift": rel,
                    "mean_feature_drift": feat,
                }
            )
        heads.append({c: w.copy() for c, w in backbone.heads.items()})
    backbone.trainable_classes = ()
    return RunResult(
        acc,
        logs,
        drift,
        dataset_hash(base, tasks),
        backbone,
        heads,
        asdict(diag),
        time.perf_counter() - t0,
    )
