"""Implicit Euler propagators on the full system and on POD-reduced systems."""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from ._validation import check_state, integral_ratio
from .discretization import system_at
from .exceptions import DimensionMismatchError, SolverError

# "auto" factorizes directly below this size, where a sparse LU is cheaper
# than the Krylov call overhead; above it, Jacobi-preconditioned BiCGSTAB.
DIRECT_SOLVE_MAX_DOF = 512


@dataclass
class SnapshotMatrix:
    """States gathered every ``stride`` fine steps, first column = initial state."""

    columns: np.ndarray
    stride: int
    origin: dict = field(default_factory=dict)

    @property
    def n_snapshots(self):
        return self.columns.shape[1]


def _as_modes(basis):
    return np.asarray(getattr(basis, "modes_", basis), dtype=np.float64)


def _linear_solve(A, rhs, tol, maxiter, method):
    n = A.shape[0]
    if method == "auto":
        method = "direct" if n <= DIRECT_SOLVE_MAX_DOF else "bicgstab"
    if method == "direct":
        return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs)
    if method == "bicgstab":
        inv_diag = 1.0 / A.diagonal()
        precond = spla.LinearOperator(A.shape, matvec=lambda x: inv_diag * x)
        # the recursive residual drifts from the true one; leave headroom for
        # the explicit residual check in fine_step
        u, info = spla.bicgstab(A, rhs, rtol=0.1 * tol, atol=0.0, maxiter=maxiter,
                                M=precond)
        if info > 0:
            res = np.linalg.norm(A @ u - rhs)
            raise SolverError(f"BiCGSTAB hit the {maxiter}-iteration cap", residual=res)
        if info < 0:
            raise SolverError("BiCGSTAB breakdown")
        return u
    raise ValueError(f"unknown solver {method!r}")


def fine_step(system, t, dt, u_prev, tol=1e-10, solver="auto", maxiter=5000):
    """One implicit Euler step of the full system.

    ``t`` is the new time level: solves ``A(t) u = b(t) + M u_prev``.
    """
    u_prev = check_state(u_prev, system.n_dof, "u_prev")
    A, b = system_at(system, t, dt)
    rhs = b + system.mass @ u_prev
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    u = _linear_solve(A, rhs, tol, maxiter, solver)
    residual = np.linalg.norm(A @ u - rhs)
    if not residual <= tol * rhs_norm:
        raise SolverError(
            f"fine step residual {residual:.3e} exceeds {tol:.1e} * {rhs_norm:.3e}",
            residual=residual, context={"t": t})
    return u


def fine_propagate(system, t0, t1, u0, dt, stride=None, tol=1e-10, solver="auto",
                   origin=None):
    """Chain fine steps from ``t0`` to ``t1``.

    Returns the end state and a :class:`SnapshotMatrix` of the states at local
    steps ``0, stride, 2*stride, ...`` (``None`` when ``stride`` is ``None``).
    """
    n_steps = integral_ratio(t1 - t0, dt, "fine_step")
    u = check_state(u0, system.n_dof, "u0").copy()
    cols = None
    if stride is not None:
        if stride < 1:
            raise ValueError("snapshot stride must be >= 1")
        cols = [u.copy()]
    for i in range(n_steps):
        u = fine_step(system, t0 + (i + 1) * dt, dt, u, tol=tol, solver=solver)
        if cols is not None and (i + 1) % stride == 0:
            cols.append(u.copy())
    if cols is None:
        return u, None
    origin = dict(origin or {}, start_time=t0)
    return u, SnapshotMatrix(np.column_stack(cols), stride, origin)


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Galerkin projection of a :class:`DiscreteSystem` onto a basis ``R``.

    ``mass = R^T M R``, ``terms[j] = R^T A_j R``, ``loads[j] = R^T b_j``.
    """

    modes: np.ndarray
    mass: np.ndarray
    terms: tuple
    coeffs: tuple
    loads: tuple
    load_coeffs: tuple

    @property
    def dim(self):
        return self.mass.shape[0]

    def system_at(self, t, dT):
        A = self.mass.copy()
        for mat, c in zip(self.terms, self.coeffs):
            A += (dT * c(t)) * mat
        b = np.zeros(self.dim)
        for vec, c in zip(self.loads, self.load_coeffs):
            b += (dT * c(t)) * vec
        return A, b


def reduce(system, basis):
    """Project ``system`` onto the columns of ``basis`` (a POD basis or array)."""
    R = _as_modes(basis)
    if R.ndim != 2 or R.shape[0] != system.n_dof:
        raise DimensionMismatchError(
            f"basis shape {R.shape} incompatible with N_g={system.n_dof}")
    if R.shape[1] < 1:
        raise DimensionMismatchError("basis must have at least one column")
    mass = R.T @ (system.mass @ R)
    terms = tuple(R.T @ (t.matrix @ R) for t in system.operator_terms)
    loads = tuple(R.T @ t.vector for t in system.load_terms)
    return ReducedSystem(
        modes=R, mass=mass, terms=terms,
        coeffs=tuple(t.coeff for t in system.operator_terms),
        loads=loads, load_coeffs=tuple(t.coeff for t in system.load_terms))


def extend(system, reduced, d):
    """Border ``reduced`` with one extra basis column ``d``.

    Only the new row and column of each block are computed, so augmenting an
    ``m``-dimensional reduced system costs ``O(m N_g)`` per term.
    """
    R = reduced.modes
    d = check_state(d, system.n_dof, "d")

    def border(block, A):
        Ad = A @ d
        col = R.T @ Ad
        row = (A.T @ d) @ R
        out = np.empty((block.shape[0] + 1,) * 2)
        out[:-1, :-1] = block
        out[:-1, -1] = col
        out[-1, :-1] = row
        out[-1, -1] = d @ Ad
        return out

    return ReducedSystem(
        modes=np.column_stack([R, d]),
        mass=border(reduced.mass, system.mass),
        terms=tuple(border(blk, t.matrix) for blk, t in zip(reduced.terms,
                                                              system.operator_terms)),
        coeffs=reduced.coeffs,
        loads=tuple(np.append(v, d @ t.vector) for v, t in zip(reduced.loads,
                                                                system.load_terms)),
        load_coeffs=reduced.load_coeffs)


def _singular(A, t):
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(A)
    return SolverError(f"singular reduced matrix (cond={cond:.3e})", context={"t": t})


def coarse_propagate(reduced, t0, t1, u0_red, dT):
    """Implicit Euler in the reduced space with a dense LU solve per step."""
    n_steps = integral_ratio(t1 - t0, dT, "coarse_step")
    u = np.asarray(u0_red, dtype=np.float64)
    if u.shape != (reduced.dim,):
        raise DimensionMismatchError(
            f"reduced state has shape {u.shape}, expected ({reduced.dim},)")
    for i in range(n_steps):
        A, b = reduced.system_at(t0 + (i + 1) * dT, dT)
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                u = la.solve(A, b + reduced.mass @ u, check_finite=False)
        except la.LinAlgError as exc:
            raise _singular(A, t0 + (i + 1) * dT) from exc
        # diagonal systems bypass LU and divide by zero silently
        if not np.all(np.isfinite(u)):
            raise _singular(A, t0 + (i + 1) * dT)
    return u


def project(basis, mass, u):
    """Coefficients of the M-orthogonal projection of ``u``: ``R^T M u``."""
    R = _as_modes(basis)
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != R.shape[0]:
        raise DimensionMismatchError(f"state length {u.shape[0]} != {R.shape[0]}")
    return R.T @ (mass @ u)


def lift(basis, u_red):
    R = _as_modes(basis)
    u_red = np.asarray(u_red, dtype=np.float64)
    if u_red.shape[0] != R.shape[1]:
        raise DimensionMismatchError(f"reduced length {u_red.shape[0]} != {R.shape[1]}")
    return R @ u_red


def m_norm(mass, u):
    return math.sqrt(max(float(u @ (mass @ u)), 0.0))
