"""Plain and POD-adaptive parareal iterations.

Iteration 0 runs the fine propagator on the warmup span ``[0, T0]``, builds a
POD basis from its snapshots and sweeps the reduced coarse propagator over
``[T0, T]``.  Each later iteration ``k``

(a) runs the fine propagator concurrently on subintervals ``n >= k-1``,
    collecting snapshots;
(b) (adaptive mode) compresses each subinterval's snapshots to modes, then
    recompresses a window of neighbouring / previous-iteration modes into the
    coarse space of subinterval ``n``;
(c) sweeps ``n = k .. N-1`` sequentially, augmenting the coarse space with the
    new initial value and applying the parareal correction
    ``U[k][n+1] = F(U[k-1][n]) + G(P U[k][n]) - G(P U[k-1][n])``.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fraction, check_positive, integral_ratio
from .exceptions import ConfigurationError, ParapodError, SolverError
from .pod import BasisStore, assemble_window, pod_modes
from .propagators import coarse_propagate, extend, fine_propagate, lift, project, reduce

MODES = ("adaptive", "plain")

# Eigenvalue cut for the snapshot Gram matrices inside the solver.  The Gram
# eigenvalues carry absolute rounding of order n_s * eps * lambda_1, so 1e-14
# keeps every resolvable direction; the looser standalone default of
# ``pod_modes`` (1e-12) discards singular values below 1e-6 relative and
# caps how far the coarse propagator can approach the fine one.
DRIVER_RANK_TOL = 1e-14


@dataclass(frozen=True)
class TimePartition:
    """Warmup span ``[0, T0]`` followed by ``N`` equal subintervals of ``[T0, T]``."""

    warmup_time: float
    final_time: float
    n_subintervals: int
    fine_step: float
    coarse_step: float
    snapshot_stride: int = 5

    def __post_init__(self):
        if int(self.n_subintervals) != self.n_subintervals or self.n_subintervals < 1:
            raise ConfigurationError("n_subintervals must be a positive integer",
                                     field="n_subintervals")
        check_positive(self.fine_step, "fine_step")
        check_positive(self.coarse_step, "coarse_step")
        check_positive(self.warmup_time, "warmup_time", allow_zero=True)
        if not self.final_time > self.warmup_time:
            raise ConfigurationError("final_time must exceed warmup_time",
                                     field="final_time")
        if int(self.snapshot_stride) != self.snapshot_stride or self.snapshot_stride < 1:
            raise ConfigurationError("snapshot_stride must be an integer >= 1",
                                     field="snapshot_stride")
        integral_ratio(self.interval, self.fine_step, "fine_step")
        integral_ratio(self.interval, self.coarse_step, "coarse_step")
        integral_ratio(self.warmup_time, self.fine_step, "warmup_time")

    @property
    def interval(self):
        return (self.final_time - self.warmup_time) / self.n_subintervals

    def t(self, n):
        return self.warmup_time + n * self.interval

    @property
    def times(self):
        return np.array([self.t(n) for n in range(self.n_subintervals + 1)])

    @property
    def fine_steps_per_interval(self):
        return integral_ratio(self.interval, self.fine_step, "fine_step")

    @property
    def coarse_steps_per_interval(self):
        return integral_ratio(self.interval, self.coarse_step, "coarse_step")


@dataclass
class PararealRun:
    """State and bookkeeping of one parareal solve.

    ``iterates[k]`` is an ``(N+1, N_g)`` array of ``U[k][n]`` at ``t_n``.
    ``coarse_new[k][n]`` / ``coarse_old[k][n]`` hold the lifted coarse results
    ``G_k(P U[k][n])`` and ``G_k(P U[k-1][n])`` of subinterval ``n``;
    ``fine[k][n]`` holds ``F(U[k-1][n])``.  ``bases[n]`` is the augmented
    coarse basis of subinterval ``n`` from the latest adaptive iteration.
    """

    partition: TimePartition
    mode: str
    u0: np.ndarray
    basis0: object
    iterates: list = field(default_factory=list)
    fine: list = field(default_factory=list)
    coarse_new: list = field(default_factory=list)
    coarse_old: list = field(default_factory=list)
    pod_dims: dict = field(default_factory=dict)
    changes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    stop_reason: str = ""
    store: BasisStore = field(default_factory=BasisStore)
    bases: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.iterates) - 1

    @property
    def current(self):
        return self.iterates[-1]

    def add_time(self, phase, seconds):
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds


@contextmanager
def _timed(run, phase):
    start = time.perf_counter()
    try:
        yield
    finally:
        run.add_time(phase, time.perf_counter() - start)


def _map(executor, fn, items, phase, k):
    """Ordered map over ``items``; failures are re-raised with (k, n, phase)."""

    def wrapped(n):
        try:
            return fn(n)
        except ParapodError as exc:
            if isinstance(exc, SolverError):
                exc.context.update(k=k, n=n, phase=phase)
            raise
        except Exception as exc:
            raise SolverError(f"{phase} failed on subinterval {n} at iteration {k}: {exc}",
                              context={"k": k, "n": n, "phase": phase}) from exc

    items = list(items)
    if executor is None:
        return [wrapped(n) for n in items]
    return list(executor.map(wrapped, items))


def _m_norm(mass, u):
    return math.sqrt(max(float(u @ (mass @ u)), 0.0))


def warmup(system, partition, gamma1, tol_lin=1e-10, rank_tol=DRIVER_RANK_TOL):
    """Fine solve on ``[0, T0]`` and the iteration-0 POD basis.

    Returns ``(u0_hat, basis0, snapshots)``.
    """
    if not partition.warmup_time > 0:
        raise ConfigurationError("warmup span required (warmup_time must be > 0)",
                                 field="warmup_time")
    try:
        u_hat, snaps = fine_propagate(system, 0.0, partition.warmup_time,
                                      system.initial_state(), partition.fine_step,
                                      stride=partition.snapshot_stride, tol=tol_lin,
                                      origin={"phase": "warmup"})
    except SolverError as exc:
        exc.context.update(k=0, phase="warmup")
        raise
    basis = pod_modes(snaps, gamma1, system.mass, origin={"k": 0, "n": None},
                      rank_tol=rank_tol)
    return u_hat, basis, snaps


def iterate_zero(system, partition, u0_hat, basis0):
    """Sequential coarse sweep over ``[T0, T]`` in the warmup basis.

    The reduced state is projected once at ``T0`` and carried across
    subinterval boundaries.  Returns ``(U0, coarse)`` where ``coarse[n]`` is
    the lifted coarse result on subinterval ``n`` (equal to ``U0[n+1]``).
    """
    N = partition.n_subintervals
    red = reduce(system, basis0)
    U = np.empty((N + 1, system.n_dof))
    U[0] = u0_hat
    r = project(basis0, system.mass, u0_hat)
    coarse = {}
    for n in range(N):
        r = coarse_propagate(red, partition.t(n), partition.t(n + 1), r,
                             partition.coarse_step)
        U[n + 1] = lift(basis0, r)
        coarse[n] = U[n + 1]
    return U, coarse


def start_run(system, partition, mode, gamma1, tol_lin=1e-10, rank_tol=DRIVER_RANK_TOL):
    run_ = PararealRun(partition=partition, mode=mode, u0=None, basis0=None)
    with _timed(run_, "warmup"):
        u0, basis0, _ = warmup(system, partition, gamma1, tol_lin, rank_tol)
    run_.u0, run_.basis0 = u0, basis0
    run_.pod_dims[(0, 0)] = {"window": basis0.n_components_}
    with _timed(run_, "iteration0"):
        U0, coarse = iterate_zero(system, partition, u0, basis0)
    run_.iterates.append(U0)
    run_.fine.append({})
    run_.coarse_new.append(coarse)
    run_.coarse_old.append({})
    return run_


def _fine_phase(run_, system, k, executor, with_snapshots, tol_lin):
    part = run_.partition
    prev = run_.iterates[k - 1]
    stride = part.snapshot_stride if with_snapshots else None

    def task(n):
        return fine_propagate(system, part.t(n), part.t(n + 1), prev[n], part.fine_step,
                              stride=stride, tol=tol_lin,
                              origin={"k": k, "n": n})

    with _timed(run_, "fine"):
        results = _map(executor, task, range(k - 1, part.n_subintervals), "fine", k)
    fine = {n: res[0] for n, res in zip(range(k - 1, part.n_subintervals), results)}
    snaps = {n: res[1] for n, res in zip(range(k - 1, part.n_subintervals), results)}
    return fine, snaps


def _coarse_pair(system, part, basis, red, u_new, u_old, n, executor):
    def g(u):
        r = project(basis, system.mass, u)
        r = coarse_propagate(red, part.t(n), part.t(n + 1), r, part.coarse_step)
        return lift(basis, r)

    if executor is None:
        return g(u_new), g(u_old)
    f_new, f_old = executor.submit(g, u_new), executor.submit(g, u_old)
    return f_new.result(), f_old.result()


def adaptive_iteration(run_, system, gamma2, gamma3, m_l, p, tol_lin=1e-10,
                       executor=None, pair_executor=None, rank_tol=DRIVER_RANK_TOL):
    """Perform adaptive iteration ``k = run_.k + 1`` in place and return ``run_``."""
    part = run_.partition
    N = part.n_subintervals
    k = run_.k + 1
    M = system.mass

    fine, snaps = _fine_phase(run_, system, k, executor, True, tol_lin)

    def pre_basis(n):
        return pod_modes(snaps[n], gamma2, M, origin={"k": k, "n": n, "kind": "pre"},
                         rank_tol=rank_tol)

    with _timed(run_, "update"):
        pre = _map(executor, pre_basis, range(k - 1, N), "pod_pre", k)
        for n, b in zip(range(k - 1, N), pre):
            run_.store.put(k, n, b.modes_)

        def window_basis(n):
            W = assemble_window(run_.store, n, k, m_l, p)
            basis = pod_modes(W, gamma3, M, origin={"k": k, "n": n, "kind": "window"},
                              rank_tol=rank_tol)
            return basis, reduce(system, basis), W.shape[1]

        windows = dict(zip(range(k, N), _map(executor, window_basis, range(k, N),
                                             "pod_window", k)))
        run_.store.evict_before(max(1, k + 1 - p))

    prev = run_.iterates[k - 1]
    U = prev.copy()
    U[k] = fine[k - 1]
    g_new, g_old = {}, {}
    with _timed(run_, "sweep"):
        for n in range(k, N):
            basis, red, n_inputs = windows[n]
            aug = basis.augment(U[n])
            if aug.n_components_ > basis.n_components_:
                red = extend(system, red, aug.modes_[:, -1])
            try:
                g_new[n], g_old[n] = _coarse_pair(system, part, aug, red, U[n], prev[n], n,
                                                  pair_executor)
            except SolverError as exc:
                exc.context.update(k=k, n=n, phase="coarse")
                raise
            U[n + 1] = fine[n] + (g_new[n] - g_old[n])
            run_.pod_dims[(k, n)] = {"pre": pre[n - (k - 1)].n_components_,
                                     "window_inputs": n_inputs,
                                     "window": basis.n_components_,
                                     "final": aug.n_components_}
            run_.bases[n] = aug
    _finish(run_, U, fine, g_new, g_old, M)
    return run_


def plain_iteration(run_, system, tol_lin=1e-10, executor=None):
    """Classical parareal iteration with the fixed warmup POD coarse space."""
    part = run_.partition
    N = part.n_subintervals
    k = run_.k + 1
    M = system.mass
    basis = run_.basis0
    red = getattr(run_, "_plain_reduced", None)
    if red is None:
        red = run_._plain_reduced = reduce(system, basis)

    fine, _ = _fine_phase(run_, system, k, executor, False, tol_lin)
    prev = run_.iterates[k - 1]
    last_coarse = run_.coarse_new[k - 1]
    U = prev.copy()
    U[k] = fine[k - 1]
    g_new, g_old = {}, {}
    with _timed(run_, "sweep"):
        for n in range(k, N):
            r = project(basis, M, U[n])
            r = coarse_propagate(red, part.t(n), part.t(n + 1), r, part.coarse_step)
            g_new[n] = lift(basis, r)
            g_old[n] = last_coarse[n]
            U[n + 1] = fine[n] + (g_new[n] - g_old[n])
            run_.pod_dims[(k, n)] = {"final": basis.n_components_}
    _finish(run_, U, fine, g_new, g_old, M)
    return run_


def _finish(run_, U, fine, g_new, g_old, M):
    prev = run_.iterates[-1]
    change = 0.0
    for n in range(U.shape[0]):
        den = _m_norm(M, U[n])
        num = _m_norm(M, U[n] - prev[n])
        if num > 0:
            change = max(change, num / den if den > 0 else math.inf)
    run_.iterates.append(U)
    run_.fine.append(fine)
    run_.coarse_new.append(g_new)
    run_.coarse_old.append(g_old)
    run_.changes.append(change)


def stopping(run_, tol=1e-8, k_max=None):
    """True once successive iterates agree to ``tol`` or ``k_max`` is reached."""
    k_max = run_.partition.n_subintervals if k_max is None else k_max
    if run_.k >= k_max:
        run_.stop_reason = run_.stop_reason or "k_max"
        return True
    if run_.k >= 1 and run_.changes[-1] <= tol:
        run_.stop_reason = "converged"
        return True
    return False


class AdaptiveParareal(BaseEstimator):
    """Parareal solver whose coarse propagator is a Galerkin-POD model.

    Parameters
    ----------
    mode : {"adaptive", "plain"}
        ``"plain"`` keeps the warmup POD space for every iteration;
        ``"adaptive"`` rebuilds and augments per-subinterval spaces each iteration.
    gamma1, gamma2, gamma3 : float
        Energy fractions for the warmup basis, the per-subinterval snapshot
        bases and the windowed bases.
    m_l, p : int
        Number of left-neighbour subintervals and previous iterations merged
        into each window.
    tol : float
        Stop when ``max_n |U[k][n] - U[k-1][n]|_M / |U[k][n]|_M <= tol``.
    max_iter : int or None
        Iteration cap, defaults to the number of subintervals.
    n_workers : int
        Thread count for the per-subinterval phases. Results do not depend on it.
    tol_lin : float
        Relative residual required from every fine linear solve.
    rank_tol : float
        Relative eigenvalue cut used by every snapshot compression in the run.
    """

    def __init__(self, mode="adaptive", gamma1=1.0 - 5.0e-6, gamma2=1.0 - 5.0e-6,
                 gamma3=1.0 - 2.0e-8, m_l=1, p=1, tol=1e-8, max_iter=None, n_workers=1,
                 tol_lin=1e-10, rank_tol=DRIVER_RANK_TOL):
        self.mode = mode
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.gamma3 = gamma3
        self.m_l = m_l
        self.p = p
        self.tol = tol
        self.max_iter = max_iter
        self.n_workers = n_workers
        self.tol_lin = tol_lin
        self.rank_tol = rank_tol

    def _validate_params(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}", field="mode")
        for name in ("gamma1", "gamma2", "gamma3"):
            check_fraction(getattr(self, name), name)
        for name in ("m_l", "p"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ConfigurationError(f"{name} must be a non-negative integer", field=name)
        if int(self.n_workers) < 1:
            raise ConfigurationError("n_workers must be >= 1", field="n_workers")

    def fit(self, system, partition, callback=None):
        """Run the parareal solve; ``callback(run)`` is called after each iteration."""
        self._validate_params()
        k_max = partition.n_subintervals if self.max_iter is None else int(self.max_iter)
        run_ = start_run(system, partition, self.mode, self.gamma1, self.tol_lin,
                         self.rank_tol)
        if callback is not None:
            callback(run_)
        workers = int(self.n_workers)
        pool = ThreadPoolExecutor(workers) if workers > 1 else None
        pair_pool = ThreadPoolExecutor(2) if workers > 1 else None
        try:
            while not stopping(run_, self.tol, k_max):
                if self.mode == "adaptive":
                    adaptive_iteration(run_, system, self.gamma2, self.gamma3, self.m_l,
                                       self.p, self.tol_lin, pool, pair_pool, self.rank_tol)
                else:
                    plain_iteration(run_, system, self.tol_lin, pool)
                if callback is not None:
                    callback(run_)
        finally:
            for p_ in (pool, pair_pool):
                if p_ is not None:
                    p_.shutdown()
        self.run_ = run_
        self.n_iter_ = run_.k
        self.stop_reason_ = run_.stop_reason
        self.solution_ = run_.current
        self.times_ = partition.times
        return self

    def predict(self, n=None):
        """Latest iterate at all ``t_n`` (or the single index ``n``)."""
        sol = self.solution_
        return sol if n is None else sol[n]
