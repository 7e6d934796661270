"""Local objective oracles: L2-regularized logistic loss on one data shard.

Each client holds a shard whose design matrix already has the labels
multiplied into the sample columns (so a sample with features a and label
b in {-1, +1} is stored as the column b * a).  With margins m_j = column_j
dot x, the local objective and its derivatives are

    f(x)      = (1/n) sum_j log(1 + exp(-m_j)) + (lam/2) ||x||^2
    grad f(x) = -(1/n) B (1 - sigma(m)) + lam x
    hess f(x) = (1/n) B diag(sigma(m) (1 - sigma(m))) B^T + lam I

where sigma is the logistic function and B the d x n design matrix.

Margins and sigmoids are shared by all three oracles through a scratch
buffer that must be refreshed whenever x changes; every oracle call checks
that the scratch matches the x it receives (a stale scratch is a bug, and
raises instead of silently reusing wrong values).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg


class StaleScratchError(Exception):
    """Oracle called with a scratch refreshed for a different point."""


@dataclass
class ClientShard:
    """One client's slice of the dataset, labels absorbed into columns."""

    bmat: np.ndarray  # d x n, column-major, column = label * (features, 1)
    lam: float

    @property
    def dim(self) -> int:
        return self.bmat.shape[0]

    @property
    def n_samples(self) -> int:
        return self.bmat.shape[1]


@dataclass
class OracleScratch:
    """Per-point buffers reused across f/grad/hess at the same x."""

    margins: np.ndarray
    sigmoids: np.ndarray
    generation: int = 0
    x_snapshot: np.ndarray | None = field(default=None, repr=False)


def new_scratch(shard: ClientShard) -> OracleScratch:
    n = shard.n_samples
    return OracleScratch(margins=np.zeros(n), sigmoids=np.zeros(n))


def _stable_sigmoid(m: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-free for any margin."""
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    em = np.exp(m[~pos])
    out[~pos] = em / (1.0 + em)
    return out


def refresh_scratch(shard: ClientShard, x: np.ndarray, scratch: OracleScratch) -> int:
    """Recompute margins and sigmoids for x; returns the new generation."""
    if x.shape != (shard.dim,):
        raise ValueError(
            f"x has shape {x.shape}, shard dimension is {shard.dim}"
        )
    np.matmul(shard.bmat.T, x, out=scratch.margins)
    scratch.sigmoids[:] = _stable_sigmoid(scratch.margins)
    scratch.generation += 1
    scratch.x_snapshot = x.copy()
    return scratch.generation


def _require_fresh(x: np.ndarray, scratch: OracleScratch) -> None:
    snap = scratch.x_snapshot
    if snap is None or snap.shape != x.shape or not np.array_equal(snap, x):
        raise StaleScratchError(
            "scratch was not refreshed for this x (stale generation)"
        )


def f_value(shard: ClientShard, x: np.ndarray, scratch: OracleScratch) -> float:
    """Local objective value at x."""
    _require_fresh(x, scratch)
    m = scratch.margins
    # log(1 + exp(-m)) without overflow: split on the sign of m
    loss = np.empty_like(m)
    pos = m >= 0
    loss[pos] = np.log1p(np.exp(-m[pos]))
    loss[~pos] = -m[~pos] + np.log1p(np.exp(m[~pos]))
    reg = 0.5 * shard.lam * float(np.dot(x, x))
    return float(np.sum(loss)) / shard.n_samples + reg


def gradient(
    shard: ClientShard,
    x: np.ndarray,
    scratch: OracleScratch,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Local gradient at x (allocates unless out is given)."""
    _require_fresh(x, scratch)
    coeff = (scratch.sigmoids - 1.0) / shard.n_samples
    if out is None:
        out = linalg.new_vector(shard.dim)
    np.matmul(shard.bmat, coeff, out=out)
    out += shard.lam * x
    return out


def hessian(
    shard: ClientShard,
    x: np.ndarray,
    scratch: OracleScratch,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Local Hessian at x, exactly symmetric (lower mirrors upper)."""
    _require_fresh(x, scratch)
    sig = scratch.sigmoids
    h = sig * (1.0 - sig) / shard.n_samples
    if out is None:
        out = linalg.new_matrix(shard.dim)
    np.matmul(shard.bmat * h, shard.bmat.T, out=out)
    linalg.symmetrize_from_upper(out)
    linalg.add_to_diagonal(out, shard.lam)
    return out


@dataclass
class FiniteDiffReport:
    grad_max_rel_err: float
    hess_max_rel_err: float

    def ok(self, grad_tol: float = 1e-6, hess_tol: float = 1e-5) -> bool:
        return (
            np.isfinite(self.grad_max_rel_err)
            and np.isfinite(self.hess_max_rel_err)
            and self.grad_max_rel_err <= grad_tol
            and self.hess_max_rel_err <= hess_tol
        )


def finite_diff_check(
    shard: ClientShard, x: np.ndarray, step: float = 1e-6
) -> FiniteDiffReport:
    """Compare analytic gradient/Hessian against central differences.

    The gradient is checked against central differences of f, the Hessian
    against central differences of the analytic gradient.  Discrepancies
    are reported relative to the max-norm of the analytic quantity
    (floored at 1 to keep the ratio meaningful near zero).
    """
    d = shard.dim
    scratch = new_scratch(shard)
    refresh_scratch(shard, x, scratch)
    grad = gradient(shard, x, scratch)
    hess = hessian(shard, x, scratch)

    probe = new_scratch(shard)

    def f_at(p: np.ndarray) -> float:
        refresh_scratch(shard, p, probe)
        return f_value(shard, p, probe)

    def grad_at(p: np.ndarray) -> np.ndarray:
        refresh_scratch(shard, p, probe)
        return gradient(shard, p, probe)

    fd_grad = np.zeros(d)
    fd_hess = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        fd_grad[i] = (f_at(x + e) - f_at(x - e)) / (2.0 * step)
        fd_hess[:, i] = (grad_at(x + e) - grad_at(x - e)) / (2.0 * step)

    gref = max(1.0, float(np.max(np.abs(grad))))
    href = max(1.0, float(np.max(np.abs(hess))))
    return FiniteDiffReport(
        grad_max_rel_err=float(np.max(np.abs(fd_grad - grad))) / gref,
        hess_max_rel_err=float(np.max(np.abs(fd_hess - hess))) / href,
    )
