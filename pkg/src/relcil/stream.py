"""Class-incremental task streams.

Synthetic streams are isotropic Gaussian clusters whose means sit on a sphere.
Stream classes get ids ``0..total_classes-1``; base (pretraining) classes get
the ids that follow, so the two never overlap.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import rng_stream

TRAIN_FRACTION = 0.8


@dataclass
class StreamSpec:
    total_classes: int = 40
    tasks: int = 10
    train_per_class: int = 50
    test_per_class: int = 20
    input_dim: int = 16
    cluster_separation: float = 6.0
    within_class_std: float = 1.0
    base_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.tasks < 1 or self.total_classes < 1:
            raise ConfigError("stream.tasks and stream.total_classes must be positive")
        if self.total_classes % self.tasks:
            raise ConfigError(f"stream.total_classes={self.total_classes} is not divisible by stream.tasks={self.tasks}")
        if self.train_per_class < 1 or self.test_per_class < 0 or self.base_classes < 0:
            raise ConfigError("stream sample counts must be non-negative (train >= 1)")


@dataclass
class TaskData:
    t: int
    labels: tuple
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        allowed = set(self.labels)
        if not set(self.train_y.tolist()) <= allowed or not set(self.test_y.tolist()) <= allowed:
            raise ConfigError(f"task {self.t} has samples outside its label set")

    def probe(self, size=64):
        n = min(size, len(self.train_y))
        return self.train_X[:n], self.train_y[:n]


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray


def split_classes(class_ids, T, rng):
    """Shuffle ``class_ids`` and cut them into ``T`` equal, sorted label sets."""
    class_ids = list(class_ids)
    if T < 1 or len(class_ids) % T:
        raise ConfigError(f"{len(class_ids)} classes cannot be split into {T} equal tasks")
    order = rng.permutation(len(class_ids))
    k = len(class_ids) // T
    shuffled = [class_ids[i] for i in order]
    return [tuple(sorted(shuffled[i * k : (i + 1) * k])) for i in range(T)]


def _class_means(spec, n):
    rng = rng_stream(spec.seed, "data", "means")
    mu = rng.normal(size=(n, spec.input_dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return spec.cluster_separation * mu


def _draw(spec, mean, c, count, split):
    rng = rng_stream(spec.seed, "data", "class", c, split)
    return mean + spec.within_class_std * rng.normal(size=(count, spec.input_dim))


def _assemble(t, labels, per_class_train, per_class_test, seed):
    """Concatenate per-class arrays and shuffle the training order."""
    tr_X = np.concatenate([per_class_train[c] for c in labels])
    tr_y = np.concatenate([np.full(len(per_class_train[c]), c) for c in labels])
    te_X = np.concatenate([per_class_test[c] for c in labels]) if labels else np.zeros((0, 0))
    te_y = np.concatenate([np.full(len(per_class_test[c]), c) for c in labels])
    perm = rng_stream(seed, "data", "order", t).permutation(len(tr_y))
    return TaskData(t, tuple(labels), tr_X[perm], tr_y[perm].astype(int), te_X, te_y.astype(int))


def make_stream(spec: StreamSpec):
    """Return ``(base_set, tasks)`` for a synthetic stream."""
    n_all = spec.total_classes + spec.base_classes
    means = _class_means(spec, n_all)
    stream_ids = list(range(spec.total_classes))
    label_sets = split_classes(stream_ids, spec.tasks, rng_stream(spec.seed, "data", "split"))
    train = {c: _draw(spec, means[c], c, spec.train_per_class, "train") for c in stream_ids}
    test = {c: _draw(spec, means[c], c, spec.test_per_class, "test") for c in stream_ids}
    tasks = [_assemble(t + 1, labels, train, test, spec.seed) for t, labels in enumerate(label_sets)]

    base_ids = list(range(spec.total_classes, n_all))
    if base_ids:
        bX = np.concatenate([_draw(spec, means[c], c, spec.train_per_class, "train") for c in base_ids])
        by = np.repeat(base_ids, spec.train_per_class)
    else:
        bX, by = np.zeros((0, spec.input_dim)), np.zeros(0, dtype=int)
    return LabeledSet(bX, by.astype(int)), tasks


def dataset_hash(base: LabeledSet, tasks) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(base.X).tobytes())
    h.update(np.ascontiguousarray(base.y, dtype=np.int64).tobytes())
    for task in tasks:
        h.update(repr(task.labels).encode())
        for a in (task.train_X, task.test_X):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        for a in (task.train_y, task.test_y):
            h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# CSV ingestion / export


def _fmt(x):
    return f"{x:.17g}"


def _read_rows(path):
    """Parse ``label[,split],feat_1..feat_k``; returns ``(labels, splits|None, X)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", line=1) from None
        header = [h.strip() for h in header]
        has_split = len(header) > 1 and header[1] == "split"
        feats = header[2:] if has_split else header[1:]
        if not header or header[0] != "label" or not feats or feats != [f"feat_{i + 1}" for i in range(len(feats))]:
            raise ParseError(f"unknown header {header!r}; expected label[,split],feat_1..feat_k", line=1)
        labels, splits, rows = [], [], []
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                labels.append(int(row[0]))
                vals = [float(v) for v in row[(2 if has_split else 1) :]]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite feature value", line=lineno)
            if has_split:
                if row[1] not in ("train", "test"):
                    raise ParseError(f"split must be train or test, got {row[1]!r}", line=lineno)
                splits.append(row[1])
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", line=2)
    return np.array(labels, dtype=int), (splits if has_split else None), np.array(rows, dtype=np.float64)


def load_csv(path, tasks=1, seed=0, train_fraction=TRAIN_FRACTION):
    """Read an external dataset and partition it into ``tasks`` disjoint tasks.

    Each class is split train/test by ``train_fraction`` under the "data"
    stream unless the file carries an explicit ``split`` column.
    """
    labels, splits, X = _read_rows(path)
    classes = sorted(set(labels.tolist()))
    train, test = {}, {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if splits is not None:
            train[c] = X[[i for i in idx if splits[i] == "train"]]
            test[c] = X[[i for i in idx if splits[i] == "test"]]
            continue
        perm = rng_stream(seed, "data", "csv-split", c).permutation(len(idx))
        k = int(round(train_fraction * len(idx)))
        train[c] = X[idx[perm[:k]]]
        test[c] = X[idx[perm[k:]]]
    label_sets = split_classes(classes, tasks, rng_stream(seed, "data", "split"))
    return [_assemble(t + 1, ls, train, test, seed) for t, ls in enumerate(label_sets)]


def _write_task_csv(path, X_parts, y_parts, split_parts):
    k = X_parts[0].shape[1] if X_parts else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "split"] + [f"feat_{i + 1}" for i in range(k)])
        for X, y, s in zip(X_parts, y_parts, split_parts):
            for xi, yi in zip(X, y):
                w.writerow([int(yi), s] + [_fmt(v) for v in xi])


def export_stream(base: LabeledSet, tasks, outdir, spec: StreamSpec | None = None):
    """Write ``base.csv``, one ``task_XX.csv`` per task and ``manifest.json``."""
    os.makedirs(outdir, exist_ok=True)
    manifest = {"tasks": [], "base": None, "spec": asdict(spec) if spec else None}
    if len(base.y):
        _write_task_csv(os.path.join(outdir, "base.csv"), [base.X], [base.y], ["train"])
        manifest["base"] = "base.csv"
    for task in tasks:
        name = f"task_{task.t:02d}.csv"
        _write_task_csv(
            os.path.join(outdir, name),
            [task.train_X, task.test_X],
            [task.train_y, task.test_y],
            ["train", "test"],
        )
        manifest["tasks"].append({"task": task.t, "file": name, "labels": list(task.labels)})
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path):
    """Reload an exported stream exactly; returns ``(base_set, tasks)``."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        manifest = json.load(fh)
    tasks = []
    for entry in manifest["tasks"]:
        labels, splits, X = _read_rows(os.path.join(root, entry["file"]))
        if splits is None:
            raise ParseError(f"{entry['file']} lacks a split column")
        is_train = np.array([s == "train" for s in splits])
        tasks.append(
            TaskData(entry["task"], tuple(entry["labels"]), X[is_train], labels[is_train], X[~is_train], labels[~is_train])
        )
    if manifest.get("base"):
        labels, _, X = _read_rows(os.path.join(root, manifest["base"]))
        base = LabeledSet(X, labels)
    else:
        k = tasks[0].train_X.shape[1] if tasks else 0
        base = LabeledSet(np.zeros((0, k)), np.zeros(0, dtype=int))
    seen = set()
    for task in tasks:
        if seen & set(task.labels) or set(base.y.tolist()) & set(task.labels):
            raise ConfigError(f"task {task.t} label set overlaps another task or the base set")
        seen |= set(task.labels)
    return base, tasks
