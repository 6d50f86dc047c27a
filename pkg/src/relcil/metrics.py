"""Accuracy and forgetting summaries, margins, and the numerical bound report.

The bound report compares a task-``s`` test sample under two horizons of the
same backbone: the representation it had when task ``s`` closed and the one
after task ``t``. Both sides are scored with the classifier held after task
``t`` over every class seen so far, so the only thing that differs between
them is the representation. Relations use raw inner products over all layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import eigh_batch, spectral_norm

HOLD_RTOL = 1e-6
LAMBDA_MIN_FLOOR = 1e-8
IDENTITY_RTOL = 1e-8


class AccuracyMatrix:
    """Lower-triangular table of ``a[i][j]``: accuracy on task j after task i (1-based)."""

    def __init__(self, T: int):
        if T < 1:
            raise ContractError("accuracy matrix needs at least one task")
        self.T = T
        self._a = [[None] * i for i in range(1, T + 1)]

    @classmethod
    def from_rows(cls, rows):
        acc = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            if len(row) != i:
                raise ContractError(f"row {i} must have {i} entries, got {len(row)}")
            for j, v in enumerate(row, start=1):
                acc.set(i, j, v)
        return acc

    def set(self, i, j, value):
        if not 1 <= j <= i <= self.T:
            raise ContractError(f"entry ({i}, {j}) is outside the lower triangle")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"accuracy {value} outside [0, 1]")
        self._a[i - 1][j - 1] = value

    def get(self, i, j):
        v = self._a[i - 1][j - 1]
        if v is None:
            raise ContractError(f"accuracy entry ({i}, {j}) is missing")
        return v

    @property
    def rows(self):
        return [list(r) for r in self._a]

    def complete(self):
        return all(v is not None for r in self._a for v in r)

    def errors(self):
        """Error table ``e[t][s] = 1 - a[t][s]`` as nested lists."""
        return [[1.0 - self.get(i, j) for j in range(1, i + 1)] for i in range(1, self.T + 1)]


def summarize(acc: AccuracyMatrix) -> dict:
    """Per-checkpoint mean accuracy ``A_i``, the final one and their mean."""
    if not acc.complete():
        raise ContractError("accuracy matrix has missing entries")
    A = [sum(acc.get(i, j) for j in range(1, i + 1)) / i for i in range(1, acc.T + 1)]
    return {"A_i": A, "A_last": A[-1], "A_avg": sum(A) / len(A)}


def forgetting(errors) -> list:
    """``F_t`` for t = 1..T from ``errors[t-1][s-1]``; ``F_1`` is None (undefined)."""
    out = [None]
    for t in range(2, len(errors) + 1):
        row = errors[t - 1]
        if len(row) < t or any(errors[s - 1][s - 1] is None or row[s - 1] is None for s in range(1, t)):
            raise ContractError(f"error table is missing entries needed for F_{t}")
        out.append(sum(row[s - 1] - errors[s - 1][s - 1] for s in range(1, t)) / (t - 1))
    return out


def _margins(Z, labels, H):
    """Margins and runner-up indices for rows of ``Z`` against head rows ``H``."""
    if H.shape[0] < 2:
        raise ContractError("a margin needs at least two classes")
    scores = Z @ H.T
    idx = np.arange(len(Z))
    own = scores[idx, labels]
    other = scores.copy()
    other[idx, labels] = -np.inf
    k = np.argmax(other, axis=1)
    return own - other[idx, k], k, scores


def margin(trace, label, heads: dict) -> float:
    """``z^L . w_label - max_{k != label} z^L . w_k`` with ``heads`` a class -> vector map."""
    classes = sorted(heads)
    if label not in heads:
        raise ContractError(f"label {label} has no head")
    H = np.stack([heads[c] for c in classes])
    z = np.asarray(trace.z)[-1]
    m, _, _ = _margins(z[None], np.array([classes.index(label)]), H)
    return float(m[0])


# --------------------------------------------------------------------------
# bound report


@dataclass
class BoundRecord:
    name: str
    s: int
    t: int
    lhs: float
    rhs: float | None  # None means unbounded (excluded)
    context: dict = field(default_factory=dict)

    @property
    def excluded(self):
        return self.rhs is None

    @property
    def holds(self):
        if self.rhs is None:
            return None
        return bool(self.lhs <= self.rhs + HOLD_RTOL * max(1.0, abs(self.rhs)))

    def line(self):
        rhs = "unbounded" if self.rhs is None else f"{self.rhs:.17g}"
        holds = "excluded" if self.rhs is None else str(self.holds).lower()
        return f"{self.name} {self.s} {self.t} {self.lhs:.17g} {rhs} {holds}"


@dataclass
class BoundReport:
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, s, t, reason)

    def add(self, *args, **kw):
        self.records.append(BoundRecord(*args, **kw))

    def by_name(self, name):
        return [r for r in self.records if r.name == name]

    def violations(self, names=None):
        return [r for r in self.records if r.holds is False and (names is None or r.name in names)]

    def counts(self):
        out = {}
        for r in self.records:
            c = out.setdefault(r.name, {"records": 0, "hold": 0, "excluded": 0})
            c["records"] += 1
            c["hold"] += r.holds is True
            c["excluded"] += r.excluded
        return out

    def to_text(self, header=()):
        lines = [f"# {h}" for h in header]
        lines += [f"# skipped {n} {s} {t}: {why}" for n, s, t, why in self.skipped]
        lines.append("# name s t lhs rhs holds")
        lines += [r.line() for r in self.records]
        return "\n".join(lines) + "\n"


def parse_report(text) -> list:
    """Read back the record lines of ``BoundReport.to_text``."""
    out = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, s, t, lhs, rhs, holds = line.split()
        out.append(
            {
                "name": name,
                "s": int(s),
                "t": int(t),
                "lhs": float(lhs),
                "rhs": None if rhs == "unbounded" else float(rhs),
                "holds": None if holds == "excluded" else holds == "true",
            }
        )
    return out


@dataclass
class PairStats:
    """Per-sample quantities of task ``s`` test data between horizons s and t."""

    s: int
    t: int
    err_ref: float
    err_cur: float
    gamma_ref: np.ndarray
    gamma_cur: np.ndarray
    gamma_min: float | None
    head_gap: np.ndarray  # ||w_y - w_k*||
    agg_norm: np.ndarray  # ||sum_l dh_l||
    sq_sum: np.ndarray  # sum_l ||dh_l||^2
    cross: np.ndarray  # sum_{l<m} <dh_l, dh_m>
    cross_abs: np.ndarray  # sum_{l<m} |<dh_l, dh_m>|
    identity_err: np.ndarray
    rel_drift_sq: np.ndarray  # ||R_st - R_ss||_F^2
    lam_min: np.ndarray


def pair_stats(backbone, X, y, s, t, classes, H) -> PairStats:
    """Everything the bounds need for one (s, t) pair under heads ``H`` over ``classes``."""
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    lab = np.array([pos[int(c)] for c in y])
    ref = backbone.forward_batch(X, s)
    cur = backbone.forward_batch(X, t)
    g_ref, _, sc_ref = _margins(ref.z[:, -1], lab, H)
    g_cur, k_cur, sc_cur = _margins(cur.z[:, -1], lab, H)
    # argmax takes the first maximum, i.e. the lowest class id among ties
    err_ref = float(np.mean(np.argmax(sc_ref, axis=1) != lab))
    err_cur = float(np.mean(np.argmax(sc_cur, axis=1) != lab))
    ok = g_ref > 0
    gamma_min = float(g_ref[ok].min()) if ok.any() else None

    dh = cur.h - ref.h  # (n, L, d)
    agg = dh.sum(axis=1)
    agg_sq = np.sum(agg * agg, axis=1)
    G = dh @ np.swapaxes(dh, 1, 2)
    L = dh.shape[1]
    iu = np.triu_indices(L, k=1)
    pairs = G[:, iu[0], iu[1]]
    sq_sum = np.einsum("nll->n", G)
    cross = pairs.sum(axis=1)
    cross_abs = np.abs(pairs).sum(axis=1)
    scale = np.maximum(agg_sq, sq_sum + 2.0 * cross_abs)
    resid = np.abs(agg_sq - sq_sum - 2.0 * cross)
    identity_err = np.where(scale > 0, resid / np.where(scale > 0, scale, 1.0), 0.0)

    Zr = ref.z[:, 1:]
    Zc = cur.z[:, 1:]
    R_ref = Zr @ np.swapaxes(Zr, 1, 2)
    R_cur = Zc @ np.swapaxes(Zc, 1, 2)
    rel_drift_sq = np.sum((R_cur - R_ref) ** 2, axis=(1, 2))
    lam_min = eigh_batch(0.5 * (R_ref + np.swapaxes(R_ref, 1, 2)))[0][:, -1]

    head_gap = np.linalg.norm(H[lab] - H[k_cur], axis=1)
    return PairStats(
        s, t, err_ref, err_cur, g_ref, g_cur, gamma_min, head_gap, np.sqrt(agg_sq),
        sq_sum, cross, cross_abs, identity_err, rel_drift_sq, lam_min,
    )


def _add_pair_records(report, ps: PairStats, L):
    s, t = ps.s, ps.t
    n = len(ps.gamma_ref)
    if ps.gamma_min is None:
        report.skipped.append(("lemma_margin", s, t, "no correctly classified samples under the reference model"))
    else:
        drop = float(np.mean(ps.gamma_ref - ps.gamma_cur))
        report.add("lemma_margin", s, t, ps.err_cur - ps.err_ref, drop / ps.gamma_min,
                   {"samples": n, "gamma_min": ps.gamma_min})
    for i in range(n):
        report.add("lemma_residual", s, t, float(ps.gamma_ref[i] - ps.gamma_cur[i]),
                   float(ps.head_gap[i] * ps.agg_norm[i]), {"sample": i})
        report.add("residual_identity", s, t, float(ps.identity_err[i]), IDENTITY_RTOL, {"sample": i})
        lam = float(ps.lam_min[i])
        rhs = 8.0 * (L - 1) / lam * float(ps.rel_drift_sq[i]) if lam >= LAMBDA_MIN_FLOOR else None
        report.add("lemma_relation", s, t, float(ps.cross_abs[i]), rhs, {"sample": i, "lambda_min": lam})


def theory_report(backbone, head_history, tasks, pairs=None) -> BoundReport:
    """Evaluate every bound on the stored checkpoints of a finished run.

    ``head_history[t-1]`` holds the class heads after task t; adapters are
    frozen once trained, so horizon ``s`` of the final backbone reproduces the
    model of task s exactly. ``pairs`` restricts the (s, t) list; by default
    all s < t are evaluated.
    """
    T = len(tasks)
    if len(head_history) < T or backbone.n_tasks < T:
        raise ContractError("theory report needs a checkpoint for every task")
    L = backbone.config.layers
    if pairs is None:
        pairs = [(s, t) for t in range(2, T + 1) for s in range(1, t)]
    report = BoundReport()
    per_t = {}
    for s, t in pairs:
        if not 1 <= s <= t <= T:
            raise ContractError(f"invalid pair ({s}, {t})")
        classes = sorted(c for task in tasks[:t] for c in task.labels)
        H = np.stack([head_history[t - 1][c] for c in classes])
        task = tasks[s - 1]
        ps = pair_stats(backbone, task.test_X, task.test_y, s, t, classes, H)
        _add_pair_records(report, ps, L)
        per_t.setdefault(t, []).append(ps)

    for t, stats in sorted(per_t.items()):
        stats = [p for p in stats if p.s < t]
        if not stats or len(stats) != t - 1:
            continue
        classes = sorted(c for task in tasks[:t] for c in task.labels)
        wnorm = spectral_norm(np.stack([head_history[t - 1][c] for c in classes]))
        lhs = sum(p.err_cur - p.err_ref for p in stats) / (t - 1)
        missing = [p.s for p in stats if p.gamma_min is None]
        if missing:
            for name in ("theorem_residual", "theorem_relation"):
                report.skipped.append((name, 0, t, f"margin floor undefined for task(s) {missing}"))
            continue
        r1 = sum(np.mean(np.sqrt(np.maximum(p.sq_sum + 2.0 * p.cross, 0.0))) / p.gamma_min for p in stats)
        report.add("theorem_residual", 0, t, lhs, wnorm * r1 / (t - 1), {"spectral_norm": wnorm})
        if any(np.any(p.lam_min < LAMBDA_MIN_FLOOR) for p in stats):
            report.add("theorem_relation", 0, t, lhs, None, {"spectral_norm": wnorm})
            continue
        r2 = sum(
            np.mean(np.sqrt(p.sq_sum + 16.0 * (L - 1) / p.lam_min * p.rel_drift_sq)) / p.gamma_min for p in stats
        )
        report.add("theorem_relation", 0, t, lhs, wnorm * r2 / (t - 1), {"spectral_norm": wnorm})
    return report


def max_identity_error(report: BoundReport) -> float:
    vals = [r.lhs for r in report.by_name("residual_identity")]
    return max(vals) if vals else 0.0

