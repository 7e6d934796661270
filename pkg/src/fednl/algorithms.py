"""Client and master state machines for the compressed-Newton family.

Three algorithms share one update vocabulary:

* ``fednl``     every client, every round, sends its local gradient, a
                compressed Hessian difference, and the Frobenius norm of
                that difference; the master averages, takes one Newton-type
                step, and folds the compressed differences into its copy of
                the averaged Hessian estimate;
* ``fednl-ls``  same traffic plus the local objective value, and the master
                chooses the step length by backtracking line search;
* ``fednl-pp``  only a sampled subset of clients participates each round;
                the master keeps running averages of the Hessian estimate,
                the shift, and a shifted-gradient vector, updated
                incrementally from the participants' differences.

The Newton system is solved either on the eigenvalue-clamped estimate
(option "a") or on the estimate plus the averaged shift times identity
(option "b").  All aggregation is performed in ascending client-id order
so results are reproducible bit-for-bit in any driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg, oracle
from .compressors import CompressedDelta, CompressorKind, CompressorSpec, apply_delta, compress
from .rng import TAG_MASTER, Prg, derive_round_prg, derive_stream

ALGORITHMS = ("fednl", "fednl-ls", "fednl-pp")
OPTIONS = ("a", "b")
HESSIAN_INITS = ("lambda-identity", "zero", "exact")
LS_MAX_BACKTRACKS = 60


class LineSearchError(Exception):
    """Backtracking exhausted its step cap without satisfying the decrease test."""

    def __init__(self, rnd: int, f_start: float, f_best: float):
        self.round = rnd
        super().__init__(
            f"line search failed at round {rnd}: started at f={f_start:.17g}, "
            f"best trial f={f_best:.17g} after {LS_MAX_BACKTRACKS} backtracks"
        )


class DivergenceError(Exception):
    """The iterate left the representable range (non-finite coordinates)."""

    def __init__(self, rnd: int):
        self.round = rnd
        super().__init__(f"non-finite iterate after round {rnd}; run diverged")


@dataclass
class RunConfig:
    """Everything that determines a run's trajectory (same on all nodes)."""

    algorithm: str = "fednl"
    option: str = "b"
    compressor: CompressorSpec = field(
        default_factory=lambda: CompressorSpec(CompressorKind.IDENTITY)
    )
    rounds: int = 100
    alpha: float | None = None  # None = kind-dependent default
    lam: float = 1e-3
    mu: float | None = None  # None = lam
    ls_c: float = 0.49
    ls_gamma: float = 0.5
    tau: int | None = None  # participants per round (fednl-pp only)
    run_seed: int = 0
    hessian_init: str = "lambda-identity"
    reconstruct_indices: bool = True
    # runtime knobs, not part of the algorithm identity
    stop_grad_norm: float | None = None
    timeout_s: float = 30.0

    def validate(self, n_clients: int | None = None) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.option not in OPTIONS:
            raise ValueError(f"unknown option {self.option!r}")
        if self.hessian_init not in HESSIAN_INITS:
            raise ValueError(f"unknown hessian init {self.hessian_init!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.ls_c < 1.0:
            raise ValueError("line search c must be in (0, 1)")
        if not 0.0 < self.ls_gamma < 1.0:
            raise ValueError("line search gamma must be in (0, 1)")
        if self.algorithm == "fednl-pp":
            if self.tau is None:
                raise ValueError("fednl-pp requires tau")
            if n_clients is not None and not 1 <= self.tau <= n_clients:
                raise ValueError(f"tau={self.tau} out of range [1, {n_clients}]")
        if not 0 <= self.run_seed < (1 << 64):
            raise ValueError("seed must fit in 64 bits")

    @property
    def effective_mu(self) -> float:
        return self.lam if self.mu is None else self.mu

    @property
    def is_ls(self) -> bool:
        return self.algorithm == "fednl-ls"

    @property
    def is_pp(self) -> bool:
        return self.algorithm == "fednl-pp"

    def needs_init_exchange(self, n_clients: int) -> bool:
        return self.is_pp or self.hessian_init == "exact"


def default_alpha(spec: CompressorSpec, w: int) -> float:
    """Step size for folding compressed differences into the estimate.

    Contractive kinds use 1 - sqrt(1 - delta); unbiased kinds use
    1 / (omega + 1); identity transmits everything and uses 1.
    """
    spec.validate(w)
    if spec.kind is CompressorKind.IDENTITY:
        return 1.0
    if spec.kind in (CompressorKind.TOPK, CompressorKind.TOPLEK):
        # plain float so repr() of the resolved value is stable across
        # numpy versions (it feeds the canonical config text)
        return 1.0 - math.sqrt(1.0 - spec.delta_fraction(w))
    return 1.0 / (spec.omega(w) + 1.0)


def resolve_alpha(cfg: RunConfig, w: int) -> float:
    return default_alpha(cfg.compressor, w) if cfg.alpha is None else cfg.alpha


@dataclass
class ClientUpdate:
    """One client's per-round message (fednl / fednl-ls)."""

    grad: np.ndarray
    shift: float  # Frobenius norm of the uncompressed Hessian difference
    delta: CompressedDelta
    f_local: float | None = None  # present under fednl-ls


@dataclass
class PPUpdate:
    """One participant's per-round message (fednl-pp): increments only."""

    delta: CompressedDelta
    shift_diff: float
    gvec_diff: np.ndarray


@dataclass
class InitPayload:
    """Client -> master numbers needed before round 0 (when any)."""

    hessian_packed: np.ndarray | None = None  # exact init only
    shift0: float | None = None  # fednl-pp only
    gvec0: np.ndarray | None = None  # fednl-pp only


class ClientCore:
    """Per-client state and round logic, shared by every driver."""

    def __init__(self, cid: int, shard: oracle.ClientShard, cfg: RunConfig):
        self.cid = cid
        self.shard = shard
        self.cfg = cfg
        d = shard.dim
        self.w = linalg.packed_length(d)
        cfg.compressor.validate(self.w)
        self.alpha = resolve_alpha(cfg, self.w)
        self.hest = linalg.new_matrix(d)  # local Hessian estimate H_i
        self._scratch = oracle.new_scratch(shard)
        self._eval_scratch = oracle.new_scratch(shard)
        self._hbuf = linalg.new_matrix(d)
        self._dbuf = linalg.new_matrix(d)
        # fednl-pp running state
        self.point = np.zeros(d)  # last point this client participated at
        self.shift = 0.0
        self.gvec = np.zeros(d)

    def _local_hessian(self, x: np.ndarray) -> np.ndarray:
        oracle.refresh_scratch(self.shard, x, self._scratch)
        return oracle.hessian(self.shard, x, self._scratch, out=self._hbuf)

    def init_state(self, x0: np.ndarray) -> InitPayload:
        """Set the local estimate and (for pp) the shift/gvec state at x0."""
        cfg = self.cfg
        payload = InitPayload()
        need_hess = cfg.hessian_init == "exact" or cfg.is_pp
        hess = self._local_hessian(x0) if need_hess else None

        if cfg.hessian_init == "zero":
            self.hest[:] = 0.0
        elif cfg.hessian_init == "lambda-identity":
            self.hest[:] = 0.0
            linalg.add_to_diagonal(self.hest, self.shard.lam)
        else:
            self.hest[:] = hess
            payload.hessian_packed = linalg.pack_upper(self.hest)

        if cfg.is_pp:
            self.point = x0.copy()
            np.subtract(self.hest, hess, out=self._dbuf)
            self.shift = linalg.frobenius_norm_symmetric(self._dbuf)
            grad = oracle.gradient(self.shard, x0, self._scratch)
            self.gvec = (
                linalg.matvec(self.hest, self.point)
                + self.shift * self.point
                - grad
            )
            payload.shift0 = self.shift
            payload.gvec0 = self.gvec.copy()
        return payload

    def round_fednl(self, x: np.ndarray, rnd: int) -> ClientUpdate:
        """Gradient + compressed Hessian difference at x; advances H_i."""
        cfg = self.cfg
        hess = self._local_hessian(x)
        grad = oracle.gradient(self.shard, x, self._scratch)
        np.subtract(hess, self.hest, out=self._dbuf)
        shift = linalg.frobenius_norm_symmetric(self._dbuf)
        prg = derive_round_prg(cfg.run_seed, self.cid, rnd)
        delta = compress(self._dbuf, cfg.compressor, prg)
        apply_delta(self.hest, delta, self.alpha)
        f_local = (
            oracle.f_value(self.shard, x, self._scratch) if cfg.is_ls else None
        )
        return ClientUpdate(grad=grad, shift=shift, delta=delta, f_local=f_local)

    def round_pp(self, x_new: np.ndarray, rnd: int) -> PPUpdate:
        """Participation round: move to x_new, ship state increments."""
        cfg = self.cfg
        self.point = x_new.copy()
        hess = self._local_hessian(self.point)
        grad = oracle.gradient(self.shard, self.point, self._scratch)
        np.subtract(hess, self.hest, out=self._dbuf)
        prg = derive_round_prg(cfg.run_seed, self.cid, rnd)
        delta = compress(self._dbuf, cfg.compressor, prg)
        apply_delta(self.hest, delta, self.alpha)
        np.subtract(self.hest, hess, out=self._dbuf)
        shift_new = linalg.frobenius_norm_symmetric(self._dbuf)
        gvec_new = (
            linalg.matvec(self.hest, self.point)
            + shift_new * self.point
            - grad
        )
        update = PPUpdate(
            delta=delta,
            shift_diff=shift_new - self.shift,
            gvec_diff=gvec_new - self.gvec,
        )
        self.shift = shift_new
        self.gvec = gvec_new
        return update

    def eval_f(self, x: np.ndarray) -> float:
        oracle.refresh_scratch(self.shard, x, self._eval_scratch)
        return oracle.f_value(self.shard, x, self._eval_scratch)

    def eval_grad(self, x: np.ndarray) -> np.ndarray:
        oracle.refresh_scratch(self.shard, x, self._eval_scratch)
        return oracle.gradient(self.shard, x, self._eval_scratch)


@dataclass
class StepInfo:
    """What the master learned in one round (feeds the metrics row)."""

    grad_norm: float
    f_value: float | None = None
    ls_steps: int = 0


def line_search_step(
    x: np.ndarray,
    direction: np.ndarray,
    f_x: float,
    grad_x: np.ndarray,
    f_eval: Callable[[np.ndarray], float],
    c: float,
    gamma: float,
    rnd: int = 0,
) -> tuple[int, np.ndarray]:
    """Backtracking along ``x - gamma**s * direction``.

    Accepts the first s (from 0) with
    ``f(trial) <= f(x) - c * gamma**s * <grad, direction>``; raises
    :class:`LineSearchError` if s exceeds 60.  ``direction`` points along
    the gradient (the step subtracts it), so the decrement is positive for
    a descent direction.
    """
    decrement = float(np.dot(grad_x, direction))
    f_best = np.inf
    for s in range(LS_MAX_BACKTRACKS + 1):
        step = gamma**s
        trial = x - step * direction
        f_trial = f_eval(trial)
        if f_trial <= f_x - c * step * decrement:
            return s, trial
        f_best = min(f_best, f_trial)
    raise LineSearchError(rnd, f_x, f_best)


class MasterCore:
    """Master state and per-round reductions, shared by every driver."""

    def __init__(self, cfg: RunConfig, d: int, n_clients: int):
        cfg.validate(n_clients)
        self.cfg = cfg
        self.d = d
        self.n = n_clients
        self.w = linalg.packed_length(d)
        self.alpha = resolve_alpha(cfg, self.w)
        self.x = np.zeros(d)
        self.hest = linalg.new_matrix(d)
        self.shift = 0.0
        self.gvec = np.zeros(d)
        self.round = 0
        self._subset_prg: Prg = derive_stream(cfg.run_seed, TAG_MASTER)

    def apply_init(self, payloads: dict[int, InitPayload] | None) -> None:
        """Fold the round-0 state in (ascending client id where it matters)."""
        cfg = self.cfg
        if cfg.hessian_init == "lambda-identity":
            linalg.add_to_diagonal(self.hest, cfg.lam)
        elif cfg.hessian_init == "exact":
            acc = np.zeros(self.w)
            for cid in sorted(payloads):
                acc += payloads[cid].hessian_packed
            acc /= self.n
            self.hest = linalg.unpack_to_symmetric(acc, self.d)
        if cfg.is_pp:
            shift_acc = 0.0
            gvec_acc = np.zeros(self.d)
            for cid in sorted(payloads):
                shift_acc += payloads[cid].shift0
                gvec_acc += payloads[cid].gvec0
            self.shift = shift_acc / self.n
            self.gvec = gvec_acc / self.n

    def _mean_grad_shift(
        self, updates: dict[int, ClientUpdate]
    ) -> tuple[np.ndarray, float]:
        grad = np.zeros(self.d)
        shift = 0.0
        for cid in sorted(updates):
            grad += updates[cid].grad
            shift += updates[cid].shift
        return grad / self.n, shift / self.n

    def _newton_direction(self, grad: np.ndarray, shift: float) -> np.ndarray:
        if self.cfg.option == "a":
            system = linalg.eigen_clamp_min(self.hest, self.cfg.effective_mu)
        else:
            system = np.array(self.hest, order="F", copy=True)
            linalg.add_to_diagonal(system, shift)
        return linalg.cholesky_solve(system, grad)

    def _fold_deltas(self, updates: dict[int, ClientUpdate | PPUpdate]) -> None:
        scale = self.alpha / self.n
        for cid in sorted(updates):
            apply_delta(self.hest, updates[cid].delta, scale)

    def _guard_finite(self) -> None:
        if not np.all(np.isfinite(self.x)):
            raise DivergenceError(self.round)

    def step_fednl(self, updates: dict[int, ClientUpdate]) -> StepInfo:
        """Plain Newton-type step from a full round of updates."""
        if len(updates) != self.n:
            raise ValueError(f"expected {self.n} updates, got {len(updates)}")
        grad, shift = self._mean_grad_shift(updates)
        direction = self._newton_direction(grad, shift)
        self._fold_deltas(updates)
        self.x = self.x - direction
        self.round += 1
        self._guard_finite()
        return StepInfo(grad_norm=float(np.linalg.norm(grad)))

    def step_ls(
        self,
        updates: dict[int, ClientUpdate],
        f_mean_eval: Callable[[np.ndarray], float],
    ) -> StepInfo:
        """Line-searched step; trial objectives come from ``f_mean_eval``."""
        if len(updates) != self.n:
            raise ValueError(f"expected {self.n} updates, got {len(updates)}")
        grad, shift = self._mean_grad_shift(updates)
        f_now = 0.0
        for cid in sorted(updates):
            f_now += updates[cid].f_local
        f_now /= self.n
        direction = self._newton_direction(grad, shift)
        steps, x_new = line_search_step(
            self.x,
            direction,
            f_now,
            grad,
            f_mean_eval,
            self.cfg.ls_c,
            self.cfg.ls_gamma,
            rnd=self.round,
        )
        self._fold_deltas(updates)
        self.x = x_new
        self.round += 1
        self._guard_finite()
        return StepInfo(
            grad_norm=float(np.linalg.norm(grad)), f_value=f_now, ls_steps=steps
        )

    def pp_select(self) -> list[int]:
        """This round's participants (ascending ids, uniform tau-subset)."""
        chosen = self._subset_prg.partial_shuffle_prefix(self.n, self.cfg.tau)
        return sorted(int(c) for c in chosen)

    def pp_new_point(self) -> np.ndarray:
        """Next iterate from the current running averages (before updates)."""
        system = np.array(self.hest, order="F", copy=True)
        linalg.add_to_diagonal(system, self.shift)
        self.x = linalg.cholesky_solve(system, self.gvec)
        self._guard_finite()
        return self.x

    def pp_apply(self, updates: dict[int, PPUpdate]) -> None:
        """Fold participant increments into the running averages."""
        for cid in sorted(updates):
            upd = updates[cid]
            self.gvec = self.gvec + upd.gvec_diff / self.n
            self.shift += upd.shift_diff / self.n
        self._fold_deltas(updates)
        self.round += 1
