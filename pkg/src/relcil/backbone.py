"""Residual tanh network with frozen base weights and stacked low-rank adapters.

Layer ``l`` computes ``h = tanh(W_l z + b_l)`` and ``z <- z + h`` where
``W_l = W0_l + sum_j B_j A_j`` over the adapters up to the requested horizon.
Horizon 0 is the bare pretrained network; horizon ``t`` includes the adapters
of tasks ``1..t``. Dropping the newest adapter from the sum gives the previous
model, so no weight copies are kept.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import rng_stream


@dataclass
class BackboneConfig:
    input_dim: int = 16
    width: int = 16
    layers: int = 6
    activation: str = "tanh"
    rank: int = 4
    adapter_targets: list | None = None  # 1-based layer indices; None adapts every layer
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1
    pretrain_batch: int = 32

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError("backbone.layers must be >= 2")
        if self.width < 1 or self.input_dim < 1:
            raise ConfigError("backbone.width and backbone.input_dim must be positive")
        if not 1 <= self.rank <= self.width:
            raise ConfigError("backbone.rank must satisfy 1 <= rank <= width")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.adapter_targets is not None:
            targets = sorted(set(int(l) for l in self.adapter_targets))
            if not targets or targets[0] < 1 or targets[-1] > self.layers:
                raise ConfigError("backbone.adapter_targets must be a non-empty subset of 1..layers")
            self.adapter_targets = targets

    @property
    def targets(self):
        """0-based indices of adapted layers."""
        if self.adapter_targets is None:
            return list(range(self.layers))
        return [l - 1 for l in self.adapter_targets]


@dataclass
class TaskAdapter:
    task: int
    A: np.ndarray  # (n_targets, r, d)
    B: np.ndarray  # (n_targets, d, r)


@dataclass
class ActivationTrace:
    """Layer states of one sample (or a batch when arrays carry a leading axis).

    ``z[l]`` is z^l for l = 0..L and ``h[l - 1]`` is h^l for l = 1..L.
    """

    z: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    horizon: int
    classes: tuple = ()

    def __getitem__(self, i):
        return ActivationTrace(self.z[i], self.h[i], self.logits[i], self.horizon, self.classes)


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        d, L = config.width, config.layers
        rng = rng_stream(seed, "init", "backbone")
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(config.input_dim), size=(d, config.input_dim))
        self.W0 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(L, d, d))
        self.bias = np.zeros((L, d))
        self.adapters: list[TaskAdapter] = []
        self.heads: dict[int, np.ndarray] = {}
        self.trainable_classes: tuple = ()
        self._frozen_cache = {}

    # ------------------------------------------------------------------
    # structure

    @property
    def n_tasks(self):
        return len(self.adapters)

    @property
    def targets(self):
        return self.config.targets

    def add_task_adapter(self, t: int, rng=None) -> TaskAdapter:
        """Append a fresh adapter for task ``t``: A Gaussian with std 1/sqrt(r), B zero."""
        if t != self.n_tasks + 1:
            raise ContractError(f"expected adapter for task {self.n_tasks + 1}, got {t}")
        if rng is None:
            rng = rng_stream(self.seed, "init", "adapter", t)
        r, d, k = self.config.rank, self.config.width, len(self.targets)
        A = rng.normal(0.0, 1.0 / np.sqrt(r), size=(k, r, d))
        adapter = TaskAdapter(t, A, np.zeros((k, d, r)))
        self.adapters.append(adapter)
        self._frozen_cache.clear()
        return adapter

    def add_classes(self, classes):
        for c in classes:
            c = int(c)
            if c in self.heads:
                raise ContractError(f"class {c} already has a head")
            self.heads[c] = np.zeros(self.config.width)

    def head_matrix(self, classes) -> np.ndarray:
        try:
            return np.stack([self.heads[int(c)] for c in classes]) if len(classes) else np.zeros((0, self.config.width))
        except KeyError as exc:
            raise ContractError(f"unknown class {exc.args[0]}") from None

    def _check_horizon(self, horizon):
        if not 0 <= horizon <= self.n_tasks:
            raise ContractError(f"horizon {horizon} outside 0..{self.n_tasks}")

    def effective_weight(self, layer: int, horizon: int) -> np.ndarray:
        """``W0 + sum_{j <= horizon} B_j A_j`` for 1-based ``layer``."""
        self._check_horizon(horizon)
        if not 1 <= layer <= self.config.layers:
            raise ContractError(f"layer {layer} outside 1..{self.config.layers}")
        return self.weights(horizon)[layer - 1]

    def weights(self, horizon: int) -> np.ndarray:
        """All effective weights at ``horizon`` as an ``(L, d, d)`` array."""
        self._check_horizon(horizon)
        if horizon == self.n_tasks and horizon > 0:
            # newest adapter is live; never cache it
            W = self._frozen(horizon - 1).copy()
            ad = self.adapters[horizon - 1]
            for k, l in enumerate(self.targets):
                W[l] = W[l] + ad.B[k] @ ad.A[k]
            return W
        return self._frozen(horizon)

    def _frozen(self, horizon):
        key = (horizon, self.n_tasks)
        if key not in self._frozen_cache:
            W = self.W0.copy()
            for ad in self.adapters[:horizon]:
                for k, l in enumerate(self.targets):
                    W[l] = W[l] + ad.B[k] @ ad.A[k]
            self._frozen_cache = {key: W}
        return self._frozen_cache[key]

    def invalidate(self):
        """Drop cached weight sums after editing frozen parameters in place."""
        self._frozen_cache.clear()

    # ------------------------------------------------------------------
    # forward / backward

    def embed_inputs(self, X):
        return np.asarray(X, dtype=np.float64) @ self.embed.T

    def forward_batch(self, X, horizon: int, classes=(), weights=None) -> ActivationTrace:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.config.input_dim:
            raise ContractError(f"inputs must have {self.config.input_dim} features, got {X.shape[1]}")
        if weights is None:
            weights = self.weights(horizon)
        H = self.head_matrix(classes)
        n, L, d = X.shape[0], self.config.layers, self.config.width
        z = np.empty((n, L + 1, d))
        h = np.empty((n, L, d))
        z[:, 0] = self.embed_inputs(X)
        for l in range(L):
            h[:, l] = np.tanh(z[:, l] @ weights[l].T + self.bias[l])
            z[:, l + 1] = z[:, l] + h[:, l]
        return ActivationTrace(z, h, z[:, L] @ H.T, horizon, tuple(int(c) for c in classes))

    def forward(self, x, horizon: int, classes=()) -> ActivationTrace:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ContractError("forward takes a single input vector; use forward_batch")
        return self.forward_batch(x[None], horizon, classes)[0]

    def dual_forward(self, X, t: int):
        """Traces under the previous (t - 1) and current (t) models.

        The previous trace is a constant of the training step: it is computed
        from frozen weights and never enters the backward pass.
        """
        if not 1 <= t <= self.n_tasks:
            raise ContractError(f"task {t} has no adapter")
        prev = self.forward_batch(X, t - 1)
        cur = self.forward_batch(X, t)
        return prev, cur

    def backward_batch(self, trace: ActivationTrace, weights, dz=None, dlogits=None):
        """Reverse pass through the residual stack.

        ``dz`` is an optional ``(n, L + 1, d)`` array of loss gradients with
        respect to every layer state, ``dlogits`` the gradient with respect to
        ``trace.logits``. Returns gradients for the effective weights, biases
        and the heads of ``trace.classes``.
        """
        z, h = trace.z, trace.h
        n, L1, d = z.shape
        L = L1 - 1
        g = np.zeros((n, d)) if dz is None else dz[:, L].copy()
        dheads = None
        if dlogits is not None and len(trace.classes):
            H = self.head_matrix(trace.classes)
            g += dlogits @ H
            dheads = dlogits.T @ z[:, L]
        dW = np.empty((L, d, d))
        db = np.empty((L, d))
        for l in range(L - 1, -1, -1):
            gu = g * (1.0 - h[:, l] ** 2)
            dW[l] = gu.T @ z[:, l]
            db[l] = gu.sum(axis=0)
            g = g + gu @ weights[l]
            if dz is not None:
                g += dz[:, l]
        return dW, db, dheads

    def adapter_grads(self, dW):
        """Chain effective-weight gradients into the newest adapter's (A, B)."""
        ad = self.adapters[-1]
        dA = np.empty_like(ad.A)
        dB = np.empty_like(ad.B)
        for k, l in enumerate(self.targets):
            dA[k] = ad.B[k].T @ dW[l]
            dB[k] = dW[l] @ ad.A[k].T
        return dA, dB

    # ------------------------------------------------------------------
    # trainable parameter vector: [A_t, B_t, heads of trainable_classes]

    def n_trainable(self):
        if not self.adapters:
            return len(self.trainable_classes) * self.config.width
        ad = self.adapters[-1]
        return ad.A.size + ad.B.size + len(self.trainable_classes) * self.config.width

    def get_params(self) -> np.ndarray:
        parts = []
        if self.adapters:
            ad = self.adapters[-1]
            parts += [ad.A.ravel(), ad.B.ravel()]
        parts += [self.heads[c] for c in self.trainable_classes]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_trainable(),):
            raise ContractError(f"expected {self.n_trainable()} parameters, got {vec.shape}")
        i = 0
        if self.adapters:
            ad = self.adapters[-1]
            ad.A = vec[i : i + ad.A.size].reshape(ad.A.shape).copy()
            i += ad.A.size
            ad.B = vec[i : i + ad.B.size].reshape(ad.B.shape).copy()
            i += ad.B.size
        d = self.config.width
        for c in self.trainable_classes:
            self.heads[c] = vec[i : i + d].copy()
            i += d

    def pack_grads(self, dA, dB, dheads):
        parts = []
        if self.adapters:
            parts += [dA.ravel(), dB.ravel()]
        if self.trainable_classes:
            parts.append(dheads.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    # ------------------------------------------------------------------
    # prediction

    def predict(self, X, horizon: int, classes) -> np.ndarray:
        """Argmax over ``classes``; ties go to the lowest class id."""
        classes = np.asarray(sorted(int(c) for c in classes))
        logits = self.forward_batch(X, horizon, classes).logits
        return classes[np.argmax(logits, axis=1)]

    # ------------------------------------------------------------------
    # persistence

    def frozen_bytes(self, upto: int) -> bytes:
        """Bytes of the embedding, base weights, biases and adapters ``1..upto``."""
        buf = [self.embed.tobytes(), self.W0.tobytes(), self.bias.tobytes()]
        for ad in self.adapters[:upto]:
            buf += [ad.A.tobytes(), ad.B.tobytes()]
        return b"".join(buf)

    def copy(self) -> Backbone:
        other = Backbone.__new__(Backbone)
        other.config = BackboneConfig(**asdict(self.config))
        other.seed = self.seed
        other.embed = self.embed.copy()
        other.W0 = self.W0.copy()
        other.bias = self.bias.copy()
        other.adapters = [TaskAdapter(a.task, a.A.copy(), a.B.copy()) for a in self.adapters]
        other.heads = {c: w.copy() for c, w in self.heads.items()}
        other.trainable_classes = tuple(self.trainable_classes)
        other._frozen_cache = {}
        return other


def save_checkpoint(backbone: Backbone, path, extra=None):
    """Write a self-describing ``.npz`` record; reloads bit-exactly."""
    meta = {
        "config": asdict(backbone.config),
        "seed": backbone.seed,
        "tasks": [a.task for a in backbone.adapters],
        "classes": sorted(backbone.heads),
        "trainable_classes": list(backbone.trainable_classes),
        "extra": extra or {},
    }
    arrays = {"embed": backbone.embed, "W0": backbone.W0, "bias": backbone.bias}
    for a in backbone.adapters:
        arrays[f"A_{a.task}"] = a.A
        arrays[f"B_{a.task}"] = a.B
    classes = meta["classes"]
    arrays["heads"] = backbone.head_matrix(classes)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Backbone:
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        bb = Backbone.__new__(Backbone)
        bb.config = BackboneConfig(**meta["config"])
        bb.seed = meta["seed"]
        bb.embed = data["embed"].copy()
        bb.W0 = data["W0"].copy()
        bb.bias = data["bias"].copy()
        bb.adapters = [TaskAdapter(t, data[f"A_{t}"].copy(), data[f"B_{t}"].copy()) for t in meta["tasks"]]
        heads = data["heads"]
        bb.heads = {c: heads[i].copy() for i, c in enumerate(meta["classes"])}
        bb.trainable_classes = tuple(meta["trainable_classes"])
        bb._frozen_cache = {}
    return bb


def pretrain_base(config: BackboneConfig, base_X, base_y, seed: int = 0, stream_classes=()) -> Backbone:
    """Fit W0 and the biases on the base classes with minibatch gradient descent.

    The temporary base-class heads are discarded afterwards; the embedding is
    never trained.
    """
    base_y = np.asarray(base_y, dtype=int)
    overlap = set(base_y.tolist()) & set(int(c) for c in stream_classes)
    if overlap:
        raise ConfigError(f"base classes overlap stream classes: {sorted(overlap)}")
    bb = Backbone(config, seed)
    classes = sorted(set(base_y.tolist()))
    n = len(base_y)
    if n == 0 or config.pretrain_epochs == 0 or len(classes) < 2:
        return bb
    base_X = np.asarray(base_X, dtype=np.float64)
    index = {c: i for i, c in enumerate(classes)}
    targets = np.array([index[c] for c in base_y])
    H = np.zeros((len(classes), config.width))
    rng = rng_stream(seed, "batch", "pretrain")
    lr = config.pretrain_lr
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.pretrain_batch):
            idx = order[start : start + config.pretrain_batch]
            W = bb.W0
            trace = bb.forward_batch(base_X[idx], 0, weights=W)
            logits = trace.z[:, -1] @ H.T
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), targets[idx]] -= 1.0
            dlogits = p / len(idx)
            dz = np.zeros_like(trace.z)
            dz[:, -1] = dlogits @ H
            dW, db, _ = bb.backward_batch(trace, W, dz=dz)
            H -= lr * (dlogits.T @ trace.z[:, -1])
            bb.W0 = bb.W0 - lr * dW
            bb.bias = bb.bias - lr * db
    bb.invalidate()
    bb._pretrain_heads = (classes, H)  # kept only for diagnostics
    return bb


def pretrain_accuracy(bb: Backbone, X, y) -> float:
    classes, H = bb._pretrain_heads
    z = bb.forward_batch(X, 0).z[:, -1]
    pred = np.asarray(classes)[np.argmax(z @ H.T, axis=1)]
    return float(np.mean(pred == np.asarray(y)))
