"""Reference solutions, error curves and the parallel cost model."""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import DiagnosticsUnavailableError, MetricError, SolverError
from .propagators import fine_propagate

CACHE_ENV = "PARAPOD_CACHE_DIR"


def relative_error(U, Uref, mass):
    """``|U - Uref|_M / |Uref|_M`` with the discrete L2 norm ``|u|_M^2 = u^T M u``."""
    U = np.asarray(U, dtype=np.float64)
    Uref = np.asarray(Uref, dtype=np.float64)
    den = float(Uref @ (mass @ Uref))
    if not den > 0:
        raise MetricError("reference has zero M-norm; relative error undefined")
    e = U - Uref
    return math.sqrt(max(float(e @ (mass @ e)), 0.0) / den)


def _cache_key(system, partition, tol_lin):
    spec = system.spec
    if (spec.initial_condition is not None or spec.velocity_terms
            or spec.forcing_terms):
        return None
    payload = {
        "spec": {f.name: getattr(spec, f.name) for f in dataclasses.fields(spec)
                 if f.name not in ("initial_condition", "velocity_terms", "forcing_terms")},
        "resolution": list(system.resolution),
        "scheme": system.scheme,
        "partition": dataclasses.asdict(partition),
        "tol_lin": tol_lin,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


def reference_trajectory(system, partition, tol_lin=1e-10, cache_dir=None):
    """Sequential fine solution from the initial condition over ``[0, T]``.

    Returns an ``(N+1, N_g)`` array with the states at ``T0 + n * dT_sub``.
    The arithmetic matches a warmup solve followed by chained per-subinterval
    fine solves exactly.  Results are cached under ``cache_dir`` (default:
    ``$PARAPOD_CACHE_DIR`` if set) keyed by a hash of the configuration.
    """
    cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
    key = _cache_key(system, partition, tol_lin) if cache_dir else None
    path = os.path.join(cache_dir, f"reference_{key}.npy") if key else None
    if path and os.path.exists(path):
        return np.load(path)

    N = partition.n_subintervals
    out = np.empty((N + 1, system.n_dof))
    u = system.initial_state()
    try:
        if partition.warmup_time > 0:
            u, _ = fine_propagate(system, 0.0, partition.warmup_time, u, partition.fine_step,
                                  tol=tol_lin)
        out[0] = u
        for n in range(N):
            u, _ = fine_propagate(system, partition.t(n), partition.t(n + 1), u,
                                  partition.fine_step, tol=tol_lin)
            out[n + 1] = u
    except SolverError as exc:
        exc.context.update(phase="reference")
        raise

    if path:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = path + f".{os.getpid()}.tmp.npy"
        np.save(tmp, out)
        os.replace(tmp, path)
    return out


@dataclass
class ErrorCurve:
    """Per-(k, n) relative errors and coarse-propagator diagnostics.

    ``errors[k, n]`` is the error of ``U[k][n]`` against the reference.
    ``fg_gap[k, n]`` and ``coarse_err[k, n]`` are indexed by the subinterval
    end point ``n``; entries that were not computed are NaN.
    """

    times: np.ndarray
    errors: np.ndarray
    fg_gap: np.ndarray
    coarse_err: np.ndarray

    def max_error(self, k):
        return float(np.nanmax(self.errors[k]))

    def iterations_to(self, threshold):
        """First iteration whose max-over-n error is ``<= threshold`` (None if never)."""
        for k in range(self.errors.shape[0]):
            if self.max_error(k) <= threshold:
                return k
        return None

    def rows(self):
        for k in range(self.errors.shape[0]):
            for n in range(self.errors.shape[1]):
                yield k, n, float(self.times[n]), float(self.errors[k, n])

    def diagnostic_rows(self):
        for k in range(self.fg_gap.shape[0]):
            for n in range(self.fg_gap.shape[1]):
                if not np.isnan(self.fg_gap[k, n]):
                    yield (k, n, float(self.times[n]), float(self.fg_gap[k, n]),
                           float(self.coarse_err[k, n]))


def error_curve(run, reference, mass):
    """Relative error of every stored iterate (diagnostic arrays left NaN)."""
    K = len(run.iterates)
    N1 = reference.shape[0]
    errs = np.array([[relative_error(run.iterates[k][n], reference[n], mass)
                      for n in range(N1)] for k in range(K)])
    nan = np.full((K, N1), np.nan)
    return ErrorCurve(run.partition.times, errs, nan, nan.copy())


def coarse_accuracy_diagnostics(run, reference, mass):
    """Error curve plus the two coarse-accuracy diagnostics.

    For iteration ``k >= 1`` and subinterval end point ``n``:

    - ``fg_gap = |F(U[k-1][n-1]) - G_k(U[k-1][n-1])|_M / |F(U[k-1][n-1])|_M``
    - ``coarse_err = |U_n - G_k(U[k][n-1])|_M / |U_n|_M``
    """
    curve = error_curve(run, reference, mass)
    for k in range(1, len(run.iterates)):
        fine, g_old, g_new = run.fine[k], run.coarse_old[k], run.coarse_new[k]
        if set(g_new) != set(g_old) or not set(g_old) <= set(fine):
            raise DiagnosticsUnavailableError(f"coarse terms missing for iteration {k}")
        for n in g_new:
            curve.fg_gap[k, n + 1] = relative_error(g_old[n], fine[n], mass)
            curve.coarse_err[k, n + 1] = relative_error(g_new[n], reference[n + 1], mass)
    return curve


# -- cost model ----------------------------------------------------------------

@dataclass
class CostModel:
    """Inputs of the parallel cost model.

    ``C_f`` scales the fine step cost ``tau_F = C_f N_g``; ``C_p1`` the dense
    reduced solve ``tau_G = C_p1 m_max^3``; ``C_p2`` the snapshot compression
    and ``C_p3`` reduced-system assembly and basis augmentation.
    """

    C_f: float
    C_p1: float
    C_p2: float
    C_p3: float
    N_g: float
    N: int
    k_max: int
    m_max: float
    n_s: float
    n_max: float
    interval: float
    fine_step: float
    coarse_step: float
    warmup_time: float

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("C_p1", "C_p2", "C_p3", "warmup_time"):
                ok = v >= 0
            else:
                ok = v > 0
            if not (ok and math.isfinite(v)):
                raise ValueError(f"{f.name} must be positive and finite, got {v}")
        if not self.fine_step <= self.coarse_step <= self.interval:
            raise ValueError("need fine_step <= coarse_step <= interval")

    @property
    def tau_F(self):
        return self.C_f * self.N_g

    @property
    def tau_G(self):
        return self.C_p1 * self.m_max ** 3

    @property
    def T_U0(self):
        return (self.C_p2 * self.n_s ** 2 + self.C_p3 * self.m_max ** 2) * self.N_g

    @property
    def T_U(self):
        return (self.C_p2 * (self.n_s ** 2 + self.n_max ** 2)
                + self.C_p3 * self.m_max ** 2) * self.N_g

    @property
    def T_A(self):
        return self.C_p3 * self.m_max * self.N_g


@dataclass
class Speedup:
    cost_seq: float
    cost_par: float
    cost_par_dominant: float
    speedup_exact: float
    speedup_approx: float
    cost_par_collapsed: float


def _cost_par_sum(cm):
    fine_sweep = cm.interval / cm.fine_step * cm.tau_F
    coarse_sub = cm.interval / cm.coarse_step * cm.tau_G
    total = (cm.warmup_time / cm.fine_step * cm.tau_F + cm.T_U0 + cm.N * coarse_sub)
    for k in range(1, int(cm.k_max) + 1):
        total += fine_sweep + cm.T_U + (cm.N - k) * (cm.T_A + coarse_sub)
    return total


def _cost_par_collapsed(cm):
    K = cm.k_max
    fine_sweep = cm.interval / cm.fine_step * cm.tau_F
    coarse_sub = cm.interval / cm.coarse_step * cm.tau_G
    return (cm.warmup_time / cm.fine_step * cm.tau_F + cm.T_U0 + cm.N * coarse_sub
            + K * (fine_sweep + cm.T_U + (cm.N - (K + 1) / 2.0) * (cm.T_A + coarse_sub)))


def speedup_model(cm):
    """Sequential vs. parallel cost and the resulting speed-up estimates.

    ``cost_par`` is the iteration-by-iteration sum (factor ``N - k`` on the
    sequential coarse work of iteration ``k``); ``cost_par_collapsed`` is the
    same quantity with the sum over ``k`` done in closed form.
    ``speedup_approx = min(N / k_max, (dT_sub / dt) * C_f / (C_p3 m_max))``.
    """
    steps = cm.interval / cm.fine_step
    cost_seq = (cm.N * steps + cm.warmup_time / cm.fine_step) * cm.tau_F
    cost_par = _cost_par_sum(cm)
    collapsed = _cost_par_collapsed(cm)
    K = cm.k_max
    dominant = (cm.warmup_time / cm.fine_step * cm.C_f
                + K * (steps * cm.C_f + cm.C_p3 * cm.m_max * (cm.N - (K + 1) / 2.0))) * cm.N_g
    if cm.C_p3 > 0:
        approx = min(cm.N / K, steps * cm.C_f / (cm.C_p3 * cm.m_max))
    else:
        approx = cm.N / K
    return Speedup(cost_seq=cost_seq, cost_par=cost_par, cost_par_dominant=dominant,
                   speedup_exact=cost_seq / cost_par, speedup_approx=approx,
                   cost_par_collapsed=collapsed)
