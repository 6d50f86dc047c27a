"""Dense linear algebra, seeded randomness and the gradient contract.

Everything here works in float64. The symmetric eigensolver is a cyclic
Jacobi iteration vectorised over a stack of equally sized matrices, which is
what the relation module needs (one small L x L matrix per sample).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
DEGENERATE_GAP = 1e-10
SYMMETRY_TOL = 1e-12

RNG_LABELS = ("init", "data", "batch", "pseudo")


# --------------------------------------------------------------------------
# randomness


def rng_stream(seed: int, label: str, *sub) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, label, *sub)``.

    The key is a hash of the labels, so streams never depend on the order in
    which other streams were consumed.
    """
    if label.split("/")[0] not in RNG_LABELS:
        raise ContractError(f"unknown rng stream label {label!r}")
    name = "|".join([str(int(seed) & 0xFFFFFFFFFFFFFFFF), label, *map(str, sub)])
    digest = hashlib.blake2b(name.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# --------------------------------------------------------------------------
# eigensolver


@dataclass
class Spectrum:
    """Eigenpairs of a symmetric matrix, values sorted descending."""

    values: np.ndarray
    vectors: np.ndarray  # columns paired with values
    sweeps: int = 0
    near_degenerate: int = 0  # count of adjacent gaps below DEGENERATE_GAP

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _check_symmetric(m):
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ContractError(f"expected square matrices, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix has non-finite entries")
    scale = np.max(np.abs(m)) if m.size else 0.0
    asym = np.max(np.abs(m - np.swapaxes(m, -1, -2))) if m.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise ContractError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def eigh_batch(mats, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS, check=True):
    """Cyclic Jacobi on a stack ``(n, m, m)`` of symmetric matrices.

    Returns ``(values, vectors, sweeps)`` with values sorted descending along
    the last axis and ``vectors[k][:, i]`` the eigenvector of ``values[k, i]``.
    Each eigenvector's largest-magnitude component (first on ties) is made
    positive so the output is reproducible.
    """
    mats = np.asarray(mats, dtype=np.float64)
    if check:
        _check_symmetric(mats)
    a = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    n, m, _ = a.shape
    v = np.broadcast_to(np.eye(m), (n, m, m)).copy()
    thresh = tol * np.sqrt(np.einsum("kij,kij->k", a, a))
    # entries at or below this are left alone; if all are, off(a) <= thresh
    skip = thresh / max(m, 1)
    offmask = ~np.eye(m, dtype=bool)

    sweeps = 0
    for sweeps in range(max_sweeps + 1):
        off = np.sqrt(np.sum(a[:, offmask] ** 2, axis=1))
        if np.all(off <= thresh):
            break
        if sweeps == max_sweeps:
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps",
                stage="eigh",
                residual=float(np.max(off - thresh)),
            )
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[:, p, q]
                live = np.abs(apq) > skip
                if not live.any():
                    continue
                safe = np.where(live, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(live, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c1, s1 = c[:, None], s[:, None]

                ap, aq = a[:, :, p].copy(), a[:, :, q]
                a[:, :, p] = c1 * ap - s1 * aq
                a[:, :, q] = s1 * ap + c1 * aq
                ap, aq = a[:, p, :].copy(), a[:, q, :]
                a[:, p, :] = c1 * ap - s1 * aq
                a[:, q, :] = s1 * ap + c1 * aq
                a[:, p, q] = 0.0
                a[:, q, p] = 0.0

                vp, vq = v[:, :, p].copy(), v[:, :, q]
                v[:, :, p] = c1 * vp - s1 * vq
                v[:, :, q] = s1 * vp + c1 * vq

    vals = np.diagonal(a, axis1=1, axis2=2)
    order = np.argsort(-vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    lead = np.argmax(np.abs(v), axis=1)
    signs = np.sign(np.take_along_axis(v, lead[:, None, :], axis=1))
    signs[signs == 0] = 1.0
    v = v * signs
    return vals, v, sweeps


def eigh_sym(m) -> Spectrum:
    """Eigendecomposition of one symmetric matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {m.shape}")
    vals, vecs, sweeps = eigh_batch(m[None])
    vals, vecs = vals[0], vecs[0]
    gaps = -np.diff(vals)
    return Spectrum(vals, vecs, sweeps, int(np.sum(gaps < DEGENERATE_GAP)))


def singular_values(m) -> np.ndarray:
    """Singular values of a symmetric matrix: |eigenvalues|, sorted descending."""
    return np.sort(np.abs(eigh_sym(m).values))[::-1]


def singular_values_batch(mats):
    """Batched singular values plus the pieces needed for their gradient.

    Returns ``(sv, signs, vectors)`` where ``sv[k, i] = signs[k, i] * lam`` for
    the eigenpair stored in ``vectors[k][:, i]``, so that
    ``d sv_i / dR = signs_i * v_i v_i^T``.
    """
    vals, vecs, _ = eigh_batch(mats)
    order = np.argsort(-np.abs(vals), axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    signs = np.where(vals < 0, -1.0, 1.0)
    return np.abs(vals), signs, vecs


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m) -> float:
    """Largest singular value of a rectangular matrix via its smaller Gram."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    top = eigh_sym(gram).values[0]
    return float(np.sqrt(max(top, 0.0)))


# --------------------------------------------------------------------------
# gradient contract


@dataclass
class GradRecord:
    value: float
    gradient: np.ndarray

    def __post_init__(self):
        self.gradient = np.asarray(self.gradient, dtype=np.float64)
        if not np.isfinite(self.value):
            raise NumericalError("objective value is not finite", stage="value")
        if not np.all(np.isfinite(self.gradient)):
            raise NumericalError("gradient has non-finite entries", stage="gradient")


class FunctionObjective:
    """Adapter turning a plain ``fun``/``grad`` pair into an objective handle."""

    def __init__(self, fun, grad, n_params):
        self.fun = fun
        self.grad = grad
        self.n_params = n_params

    def value(self, params):
        return float(self.fun(np.asarray(params, dtype=np.float64)))

    def value_and_grad(self, params):
        params = np.asarray(params, dtype=np.float64)
        return self.value(params), np.asarray(self.grad(params), dtype=np.float64)


def value_and_grad(objective, params) -> GradRecord:
    """Evaluate an objective handle and its gradient at ``params``.

    An objective handle exposes ``n_params``, ``value(params)`` and
    ``value_and_grad(params)``; both methods share the same forward code so
    the values agree bitwise.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (objective.n_params,):
        raise ContractError(f"expected {objective.n_params} parameters, got shape {params.shape}")
    value, grad = objective.value_and_grad(params)
    rec = GradRecord(float(value), grad)
    if rec.gradient.shape != params.shape:
        raise ContractError("gradient length does not match the parameter count")
    return rec


def central_differences(objective, params, step=1e-4) -> np.ndarray:
    """Independent gradient oracle: ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    params = np.asarray(params, dtype=np.float64)
    out = np.empty_like(params)
    for i in range(params.size):
        xp = params.copy()
        xm = params.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (objective.value(xp) - objective.value(xm)) / (2.0 * step)
    return out


@dataclass
class GradCheck:
    worst_rel_error: float
    offending: list = field(default_factory=list)
    checked: int = 0
    rtol: float = 1e-5

    @property
    def passed(self):
        return not self.offending


def relative_errors(analytic, numeric, floor=1e-8):
    """Componentwise ``|a - n| / max(|a|, |n|)``; NaN where both are below ``floor``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(analytic - numeric) / mag
    return np.where(mag > floor, rel, np.nan)


def check_gradient(objective, params, step=1e-4, rtol=1e-5, floor=1e-8, analytic=None) -> GradCheck:
    """Compare ``value_and_grad`` against central differences."""
    if analytic is None:
        analytic = value_and_grad(objective, params).gradient
    numeric = central_differences(objective, params, step)
    rel = relative_errors(analytic, numeric, floor)
    checked = int(np.sum(~np.isnan(rel)))
    worst = float(np.nanmax(rel)) if checked else 0.0
    bad = [int(i) for i in np.flatnonzero(np.nan_to_num(rel, nan=0.0) >= rtol)]
    return GradCheck(worst, bad, checked, rtol)
