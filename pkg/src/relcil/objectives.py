"""Training losses, the per-task objective and Gaussian classifier recalibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalError
from .numerics import rng_stream, singular_values_batch
from .relation import (
    COSINE_EPS,
    AlignmentConfig,
    batch_eigen_terms,
    huber,
    huber_grad,
    p2p_terms,
    relation_backward,
    relation_batch,
    sv_align_terms,
)

SHRINKAGE = 1e-4


@dataclass
class LossBreakdown:
    ce: float
    align: float
    total: float
    lambda_effective: float


# --------------------------------------------------------------------------
# cross-entropy


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    top = np.argmax(logits, axis=-1)
    rest = e.sum(axis=-1) - np.take_along_axis(e, top[..., None], axis=-1)[..., 0]
    # log1p keeps saturated softmax losses accurate
    lse = m[..., 0] + np.log1p(np.maximum(rest, 0.0))
    return logits - lse[..., None], e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label) -> float:
    """``-log softmax(logits)[label]`` with ``label`` an index into ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ContractError(f"label {label} outside 0..{logits.shape[-1] - 1}")
    logp, _ = _log_softmax(logits)
    return float(-logp[label])


def cross_entropy_batch(logits, targets):
    """Mean cross-entropy over rows and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=int)
    n, k = logits.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise ContractError("target outside the logit index set")
    logp, p = _log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    g = p.copy()
    g[np.arange(n), targets] -= 1.0
    return float(loss), g / n


# --------------------------------------------------------------------------
# feature distillation baselines


def _unit(S):
    norms = np.linalg.norm(S, axis=-1)
    return S / np.maximum(norms, COSINE_EPS)[..., None], norms


def feature_distill_terms(z_prev, z_cur, layers, normalize):
    """Per-sample feature alignment and its gradient w.r.t. ``z_cur[:, layers]``.

    Each selected layer contributes ``huber(||a - b||^2 / d)`` where a, b are
    the previous and current states (unit-normalised when ``normalize``).
    """
    if not layers:
        raise ContractError("feature distillation needs at least one layer")
    P = z_prev[:, layers]
    C = z_cur[:, layers]
    d = C.shape[-1]
    if normalize:
        P, _ = _unit(P)
        Cn, norms = _unit(C)
    else:
        Cn = C
    diff = P - Cn
    q = np.sum(diff * diff, axis=-1) / d
    m = len(layers)
    loss = huber(q).mean(axis=1)
    dCn = (huber_grad(q) / m)[..., None] * (-2.0 * diff / d)
    if not normalize:
        return loss, dCn
    big = norms > COSINE_EPS
    radial = np.sum(Cn * dCn, axis=-1, keepdims=True)
    safe = np.where(big, norms, COSINE_EPS)[..., None]
    dC = np.where(big[..., None], (dCn - Cn * radial) / safe, dCn / COSINE_EPS)
    return loss, dC


def feature_distill_loss(trace_prev, trace_cur, layers, normalize=True) -> float:
    zp = np.asarray(trace_prev.z)
    zc = np.asarray(trace_cur.z)
    if zp.ndim == 2:
        zp, zc = zp[None], zc[None]
    loss, _ = feature_distill_terms(zp, zc, list(layers), normalize)
    return float(loss.mean())


# --------------------------------------------------------------------------
# the per-task objective


class PrevCache:
    """Quantities of the previous model on a fixed sample set.

    The previous model never changes during a task, so its traces, relation
    matrices and spectra are computed once.
    """

    def __init__(self, backbone, X, t, config: AlignmentConfig):
        self.X = np.asarray(X, dtype=np.float64)
        L = backbone.config.layers
        self.layers = config.layers(L)
        self.z = backbone.forward_batch(self.X, t - 1).z
        self.R, _ = relation_batch(self.z, config.phi, self.layers)
        self.sv = singular_values_batch(self.R)[0] if config.strategy == "eigen" else None

    def subset(self, idx):
        sub = PrevCache.__new__(PrevCache)
        sub.X = self.X[idx]
        sub.layers = self.layers
        sub.z = self.z[idx]
        sub.R = self.R[idx]
        sub.sv = None if self.sv is None else self.sv[idx]
        return sub


def align_terms(strategy, config, prev: PrevCache, z_cur, diag=None):
    """Mean alignment over the batch and its gradient w.r.t. every layer state."""
    n, L1, _ = z_cur.shape
    L = L1 - 1
    dz = np.zeros_like(z_cur)
    if strategy == "none":
        return 0.0, dz
    if strategy in ("feature_last", "feature_all"):
        layers = [L] if strategy == "feature_last" else prev.layers
        loss, dS = feature_distill_terms(prev.z, z_cur, layers, config.normalize_features)
        dz[:, layers] += dS / n
        return float(loss.mean()), dz
    R, cache = relation_batch(z_cur, config.phi, prev.layers, diag)
    if strategy == "eigen":
        loss, dR = sv_align_terms(prev.sv, R, diag)
        value, dR = float(loss.mean()), dR / n
    elif strategy == "p2p":
        loss, dR = p2p_terms(prev.R, R)
        value, dR = float(loss.mean()), dR / n
    elif strategy == "b_eigen":
        value, dR = batch_eigen_terms(prev.R, R, diag)
    else:
        raise ContractError(f"unknown strategy {strategy!r}")
    dz[:, prev.layers] += relation_backward(dR, cache)
    return value, dz


def _finite(x, stage, strategy):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite value in {stage} (strategy={strategy})", stage=stage)


class TaskObjective:
    """``ce + lam * align`` on one batch of the current task as a function of
    the backbone's trainable vector (newest adapter plus current heads)."""

    def __init__(self, backbone, X, y, config: AlignmentConfig, lam, prev: PrevCache | None = None, diag=None):
        self.backbone = backbone
        self.t = backbone.n_tasks
        self.X = np.asarray(X, dtype=np.float64)
        self.classes = tuple(backbone.trainable_classes)
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            self.targets = np.array([index[int(c)] for c in y])
        except KeyError as exc:
            raise ContractError(f"label {exc.args[0]} is not a current-task class") from None
        if lam < 0:
            raise ContractError("lambda must be non-negative")
        self.config = config
        self.lam = float(lam)
        if prev is None and config.strategy != "none":
            prev = PrevCache(backbone, self.X, self.t, config)
        self.prev = prev
        self.diag = diag
        self.n_params = backbone.n_trainable()

    def evaluate(self, params=None, grad=True):
        bb = self.backbone
        if params is not None:
            bb.set_params(params)
        strategy = self.config.strategy
        W = bb.weights(self.t)
        cur = bb.forward_batch(self.X, self.t, self.classes, weights=W)
        _finite(cur.z, "forward", strategy)
        ce, dlogits = cross_entropy_batch(cur.logits, self.targets)
        align, dz = align_terms(strategy, self.config, self.prev, cur.z, self.diag)
        _finite(align, "align", strategy)
        total = ce + self.lam * align
        _finite(total, "total", strategy)
        br = LossBreakdown(ce, align, total, self.lam)
        if not grad:
            return br, None, cur
        dW, _, dheads = bb.backward_batch(cur, W, dz=self.lam * dz, dlogits=dlogits)
        if bb.adapters:
            dA, dB = bb.adapter_grads(dW)
        else:
            dA = dB = None
        g = bb.pack_grads(dA, dB, dheads)
        _finite(g, "backward", strategy)
        return br, g, cur

    def value(self, params):
        return self.evaluate(params, grad=False)[0].total

    def value_and_grad(self, params):
        br, g, _ = self.evaluate(params, grad=True)
        return br.total, g


def total_loss(backbone, X, y, config: AlignmentConfig, lam) -> LossBreakdown:
    """Loss breakdown of the current backbone on one batch."""
    return TaskObjective(backbone, X, y, config, lam).evaluate(grad=False)[0]


# --------------------------------------------------------------------------
# classifier recalibration


@dataclass
class ClassStats:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    count: int
    floor: float


def fit_class_stats(features, class_id=-1, shrinkage=SHRINKAGE) -> ClassStats:
    """Mean and shrunk covariance ``S + shrinkage * (tr S / d) * I``.

    When ``tr S`` is zero (one sample, or identical samples) the floor falls
    back to ``shrinkage * I``.
    """
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n, d = F.shape
    if n == 0:
        raise ContractError(f"class {class_id} has no features")
    mu = F.mean(axis=0)
    S = np.cov(F, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    mean_var = np.trace(S) / d
    floor = shrinkage * (mean_var if mean_var > 0 else 1.0)
    return ClassStats(int(class_id), mu, S + floor * np.eye(d), n, floor)


def sample_pseudo_features(stats: ClassStats, count, rng):
    try:
        chol = np.linalg.cholesky(stats.cov)
    except np.linalg.LinAlgError:
        raise NumericalError(f"covariance of class {stats.class_id} is not positive definite", stage="recalibrate") from None
    return stats.mean + rng.normal(size=(count, len(stats.mean))) @ chol.T


def recalibrate_classifier(backbone, stats: dict, samples_per_class=256, epochs=5, lr=1e-2, batch_size=32, rng=None):
    """Refit the heads of every class in ``stats`` on Gaussian pseudo-features.

    Only ``backbone.heads`` changes. Returns the list of per-epoch mean losses.
    """
    classes = sorted(stats)
    if not classes or epochs == 0:
        return []
    if rng is None:
        rng = rng_stream(backbone.seed, "pseudo", backbone.n_tasks)
    U = np.concatenate([sample_pseudo_features(stats[c], samples_per_class, rng) for c in classes])
    y = np.repeat(np.arange(len(classes)), samples_per_class)
    H = backbone.head_matrix(classes)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            loss, dlogits = cross_entropy_batch(U[idx] @ H.T, y[idx])
            H = H - lr * (dlogits.T @ U[idx])
            losses.append(loss)
        history.append(float(np.mean(losses)))
    _finite(H, "recalibrate", "-")
    for i, c in enumerate(classes):
        backbone.heads[c] = H[i].copy()
    return history
