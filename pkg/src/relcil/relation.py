"""Inter-layer relation matrices and the losses defined on them.

A relation matrix for one sample is the L' x L' table of similarities between
its layer states z^l for l in a chosen subset of 1..L (z^0 never takes part).
The batched helpers work on ``(n, L+1, d)`` state stacks and return whatever
the matching backward function needs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import frobenius_norm, singular_values, singular_values_batch

COSINE_EPS = 1e-8
HUBER_DELTA = 1.0
WEYL_TOL = 1e-9
PHIS = ("cosine", "inner")
STRATEGIES = ("eigen", "b_eigen", "p2p", "feature_last", "feature_all", "none")


@dataclass
class AlignmentConfig:
    strategy: str = "eigen"
    normalize_features: bool = True
    phi: str = "inner"
    layer_subset: list | None = None  # 1-based; None means all layers
    huber_delta: float = HUBER_DELTA

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"alignment.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.phi not in PHIS:
            raise ConfigError(f"alignment.phi must be one of {PHIS}, got {self.phi!r}")
        if self.huber_delta != HUBER_DELTA:
            raise ConfigError("alignment.huber_delta is fixed at 1")
        if self.layer_subset is not None:
            self.layer_subset = [int(l) for l in self.layer_subset]
            if not self.layer_subset:
                raise ConfigError("alignment.layer_subset must not be empty")

    def layers(self, n_layers):
        subset = list(range(1, n_layers + 1)) if self.layer_subset is None else self.layer_subset
        if min(subset) < 1 or max(subset) > n_layers or len(set(subset)) != len(subset):
            raise ConfigError(f"alignment.layer_subset must be distinct layers in 1..{n_layers}")
        return subset


@dataclass
class RelationMatrix:
    entries: np.ndarray
    phi: str
    horizon: int = -1
    sample_id: int = -1
    zero_norm: int = 0  # layer states that hit the cosine epsilon


@dataclass
class RelationDiagnostics:
    near_degenerate: int = 0
    zero_norm: int = 0
    matrices: int = 0


def huber(delta):
    a = np.abs(delta)
    return np.where(a < HUBER_DELTA, 0.5 * delta * delta, a - 0.5 * HUBER_DELTA)


def huber_grad(delta):
    return np.clip(delta, -HUBER_DELTA, HUBER_DELTA)


# --------------------------------------------------------------------------
# construction


def relation_batch(z, phi, layers, diag=None):
    """Relation matrices for a stack of traces.

    ``z`` has shape ``(n, L+1, d)``; ``layers`` are 1-based. Returns
    ``(R, cache)`` with ``R`` of shape ``(n, m, m)``.
    """
    if phi not in PHIS:
        raise ContractError(f"unknown similarity {phi!r}")
    S = z[:, layers]
    if phi == "inner":
        R = S @ np.swapaxes(S, 1, 2)
        return R, (phi, S, None, None)
    norms = np.linalg.norm(S, axis=2)
    denom = np.maximum(norms, COSINE_EPS)
    N = S / denom[:, :, None]
    R = N @ np.swapaxes(N, 1, 2)
    if diag is not None:
        diag.zero_norm += int(np.sum(norms <= COSINE_EPS))
        diag.matrices += len(R)
    return R, (phi, S, N, norms)


def relation_backward(dR, cache):
    """Gradient with respect to the selected layer states, shape ``(n, m, d)``."""
    phi, S, N, norms = cache
    sym = dR + np.swapaxes(dR, 1, 2)
    if phi == "inner":
        return sym @ S
    dN = sym @ N
    big = norms > COSINE_EPS
    radial = np.sum(N * dN, axis=2, keepdims=True)
    safe = np.where(big, norms, COSINE_EPS)[:, :, None]
    return np.where(big[:, :, None], (dN - N * radial) / safe, dN / COSINE_EPS)


def relation_matrix(trace, phi="inner", layer_subset=None, sample_id=-1) -> RelationMatrix:
    """Relation matrix of a single-sample trace."""
    z = np.asarray(trace.z)
    if z.ndim != 2:
        raise ContractError("relation_matrix expects a single-sample trace")
    L = z.shape[0] - 1
    layers = list(range(1, L + 1)) if layer_subset is None else [int(l) for l in layer_subset]
    if not layers or min(layers) < 1 or max(layers) > L:
        raise ContractError(f"layer_subset must be a non-empty subset of 1..{L}")
    diag = RelationDiagnostics()
    R, _ = relation_batch(z[None], phi, layers, diag)
    return RelationMatrix(R[0], phi, trace.horizon, sample_id, diag.zero_norm)


# --------------------------------------------------------------------------
# alignment losses (prev side is constant)


def sv_align_terms(sv_prev, R_cur, diag=None):
    """Per-sample singular-value alignment and its gradient w.r.t. ``R_cur``.

    ``sv_prev`` is ``(n, m)`` sorted descending. Values are paired by sorted
    index. Returns ``(loss (n,), dR (n, m, m))``.
    """
    sv_cur, signs, V = singular_values_batch(R_cur)
    if diag is not None:
        diag.near_degenerate += int(np.sum(-np.diff(sv_cur, axis=1) < 1e-10))
    m = sv_cur.shape[1]
    delta = sv_prev - sv_cur
    loss = huber(delta).mean(axis=1)
    coef = -huber_grad(delta) / m * signs
    dR = (V * coef[:, None, :]) @ np.swapaxes(V, 1, 2)
    return loss, dR


def p2p_terms(R_prev, R_cur):
    delta = R_prev - R_cur
    m2 = delta.shape[1] * delta.shape[2]
    loss = huber(delta).reshape(len(delta), -1).mean(axis=1)
    return loss, -huber_grad(delta) / m2


def batch_eigen_terms(R_prev, R_cur, diag=None):
    """Align spectra of the batch-averaged relations; returns ``(loss, dR per sample)``."""
    n = len(R_cur)
    if n == 0:
        raise ContractError("batch_eigen needs a non-empty batch")
    sv_prev = singular_values_batch(R_prev.mean(axis=0)[None])[0]
    loss, dR = sv_align_terms(sv_prev, R_cur.mean(axis=0)[None], diag)
    return float(loss[0]), np.broadcast_to(dR / n, R_cur.shape)


def _check_pair(r_prev, r_cur):
    a, b = np.asarray(r_prev.entries), np.asarray(r_cur.entries)
    if a.shape != b.shape:
        raise ContractError(f"relation shapes differ: {a.shape} vs {b.shape}")
    if r_prev.phi != r_cur.phi:
        raise ContractError(f"similarity mismatch: {r_prev.phi} vs {r_cur.phi}")
    return a, b


def sv_align_loss(r_prev: RelationMatrix, r_cur: RelationMatrix, return_grad=False):
    a, b = _check_pair(r_prev, r_cur)
    sv_prev = singular_values_batch(a[None])[0]
    loss, dR = sv_align_terms(sv_prev, b[None])
    return (float(loss[0]), dR[0]) if return_grad else float(loss[0])


def p2p_loss(r_prev: RelationMatrix, r_cur: RelationMatrix, return_grad=False):
    a, b = _check_pair(r_prev, r_cur)
    loss, dR = p2p_terms(a[None], b[None])
    return (float(loss[0]), dR[0]) if return_grad else float(loss[0])


def batch_eigen_loss(prev_list, cur_list) -> float:
    if not prev_list or len(prev_list) != len(cur_list):
        raise ContractError("batch_eigen needs equally sized non-empty batches")
    pairs = [_check_pair(p, c) for p, c in zip(prev_list, cur_list)]
    shapes = {p[0].shape for p in pairs}
    if len(shapes) != 1:
        raise ContractError("batch relation matrices must share a shape")
    loss, _ = batch_eigen_terms(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return loss


# --------------------------------------------------------------------------
# drift and stability diagnostics


def relation_drift(r_a: RelationMatrix, r_b: RelationMatrix) -> float:
    a, b = _check_pair(r_a, r_b)
    return frobenius_norm(a - b)


@dataclass
class WeylReport:
    max_gap: float
    perturbation_norm: float
    holds: bool


def weyl_check(r, e) -> WeylReport:
    r = np.asarray(r, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if r.shape != e.shape or r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ContractError("weyl_check needs two square matrices of the same shape")
    gap = float(np.max(np.abs(singular_values(r + e) - singular_values(r)))) if r.size else 0.0
    norm = frobenius_norm(e)
    return WeylReport(gap, norm, gap <= norm + WEYL_TOL)


@dataclass
class WeylSweep:
    cases: int
    violations: int
    worst_slack: float  # max over cases of max_gap - ||E||_F (should be <= 0)
    failures: list = field(default_factory=list)


def weyl_sweep(n_cases=10_000, sizes=range(2, 9), rng=None, psd=True) -> WeylSweep:
    """Randomised check of ``|sv_i(R + E) - sv_i(R)| <= ||E||_F``.

    Pairs are Gram matrices ``G G^T`` and ``G' G'^T`` with ``G'`` a random
    perturbation of ``G`` (so both are PSD) when ``psd`` is set, otherwise
    arbitrary symmetric matrices.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = list(sizes)
    per = np.array_split(np.arange(n_cases), len(sizes))
    violations, worst, failures = 0, -np.inf, []
    for m, idx in zip(sizes, per):
        k = len(idx)
        if k == 0:
            continue
        if psd:
            G = rng.normal(size=(k, m, m + 2))
            scale = 10.0 ** rng.uniform(-3, 0, size=(k, 1, 1))
            G2 = G + scale * rng.normal(size=G.shape)
            R = G @ np.swapaxes(G, 1, 2)
            R2 = G2 @ np.swapaxes(G2, 1, 2)
        else:
            R = rng.normal(size=(k, m, m))
            R = R + np.swapaxes(R, 1, 2)
            E = rng.normal(size=(k, m, m)) * 10.0 ** rng.uniform(-3, 0, size=(k, 1, 1))
            R2 = R + E + np.swapaxes(E, 1, 2)
        sv1 = singular_values_batch(R)[0]
        sv2 = singular_values_batch(R2)[0]
        gap = np.max(np.abs(sv2 - sv1), axis=1)
        enorm = np.sqrt(np.sum((R2 - R) ** 2, axis=(1, 2)))
        slack = gap - enorm
        bad = np.flatnonzero(slack > WEYL_TOL)
        violations += len(bad)
        worst = max(worst, float(slack.max()))
        failures += [(m, int(idx[b]), float(slack[b])) for b in bad[:5]]
    return WeylSweep(n_cases, violations, worst, failures)


DRIFT_COLUMNS = ("probe_task", "model_task", "sample_count", "mean_relation_drift", "mean_feature_drift")


def write_drift_csv(rows, path):
    """Rows are dicts keyed by ``DRIFT_COLUMNS``; reals use 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DRIFT_COLUMNS)
        for r in rows:
            w.writerow(
                [
                    int(r["probe_task"]),
                    int(r["model_task"]),
                    int(r["sample_count"]),
                    f"{r['mean_relation_drift']:.17g}",
                    f"{r['mean_feature_drift']:.17g}",
                ]
            )


def read_drift_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "probe_task": int(r["probe_task"]),
            "model_task": int(r["model_task"]),
            "sample_count": int(r["sample_count"]),
            "mean_relation_drift": float(r["mean_relation_drift"]),
            "mean_feature_drift": float(r["mean_feature_drift"]),
        }
        for r in rows
    ]
