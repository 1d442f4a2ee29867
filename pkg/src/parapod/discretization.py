"""Periodic spatial discretization of advection-diffusion-reaction problems.

The continuous problem is

    u_t - eps * Lap(u) + B(x, t) . grad(u) + c u = f(x, t)   on [0, L]^d, periodic,

with velocity and forcing written as finite sums of space-only fields times
scalar functions of time.  Assembly produces a mass matrix ``M`` and a list of
time-independent sparse terms ``A_j`` with coefficients ``alpha_j(t)`` so that an
implicit Euler step of size ``dt`` at time ``t`` reads

    (M + dt * sum_j alpha_j(t) A_j) u_new = dt * sum_j beta_j(t) b_j + M u_old.

Two schemes are available on the same structured periodic grid: tensor-product
Q1 finite elements with a consistent mass matrix (``"fe"``) and second-order
central finite differences with ``M = h^d I`` (``"fd"``).
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ._validation import check_positive
from .exceptions import AssemblyError, ConfigurationError

FIELD_KINDS = ("kolmogorov", "abc", "custom")
SCHEMES = ("fe", "fd")


@dataclass(frozen=True)
class ProblemSpec:
    """Continuous problem description.

    ``velocity_terms`` and ``forcing_terms`` are only read for
    ``field_kind="custom"``; each entry is ``(spatial_fn, time_fn)`` where
    ``spatial_fn`` maps an ``(n, d)`` point array to ``(n, d)`` velocities (or
    ``(n,)`` forcing values).  A custom spec without terms is pure
    diffusion-reaction.

    In fewer than three dimensions the 3-D field formulas are evaluated on an
    embedded point: in 2-D ``(x, y) -> (x, y, 0)``, in 1-D ``x -> (x, x, x)``,
    and the first ``d`` velocity components are kept.
    """

    field_kind: str = "kolmogorov"
    diffusion: float = 0.5
    dim: int = 3
    domain_length: float = 2.0 * math.pi
    abc_frequency: float = 1.0
    reaction: float = 0.0
    forcing_scale: float = 1.0
    initial_condition: Optional[Callable] = None
    final_time: float = 10.0
    warmup_time: float = 5.0
    velocity_terms: Sequence = ()
    forcing_terms: Sequence = ()

    def __post_init__(self):
        if self.field_kind not in FIELD_KINDS:
            raise ConfigurationError(
                f"field_kind must be one of {FIELD_KINDS}, got {self.field_kind!r}",
                field="field_kind")
        if self.dim not in (1, 2, 3):
            raise ConfigurationError(f"dim must be 1, 2 or 3, got {self.dim}", field="dim")
        check_positive(self.diffusion, "diffusion")
        check_positive(self.domain_length, "domain_length")
        check_positive(self.warmup_time, "warmup_time", allow_zero=True)
        if not self.final_time > self.warmup_time:
            raise ConfigurationError("final_time must exceed warmup_time",
                                     field="final_time")
        if not math.isfinite(self.reaction):
            raise ConfigurationError("reaction must be finite", field="reaction")

    def initial_values(self, points):
        if self.initial_condition is None:
            return np.zeros(points.shape[0])
        return np.asarray(self.initial_condition(points), dtype=np.float64)


@dataclass(frozen=True)
class OperatorTerm:
    name: str
    matrix: sp.csr_matrix
    coeff: Callable[[float], float]


@dataclass(frozen=True)
class LoadTerm:
    name: str
    vector: np.ndarray
    coeff: Callable[[float], float]


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """Assembled algebraic system; immutable once built.

    All operator matrices and the mass matrix share one CSR sparsity pattern,
    so combinations are formed directly on the ``data`` arrays.
    """

    mass: sp.csr_matrix
    operator_terms: tuple
    load_terms: tuple
    resolution: tuple
    spacing: tuple
    nodes: np.ndarray
    scheme: str
    spec: ProblemSpec
    _shared_pattern: bool = field(default=True, repr=False)

    @property
    def n_dof(self):
        return self.mass.shape[0]

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def term(self, name):
        for t in self.operator_terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def operator(self, t):
        """``sum_j alpha_j(t) A_j`` (without the mass matrix)."""
        if not self.operator_terms:
            return sp.csr_matrix(self.mass.shape)
        data = np.zeros_like(self.mass.data)
        for term in self.operator_terms:
            data += term.coeff(t) * term.matrix.data
        return self._with_data(data)

    def load(self, t):
        b = np.zeros(self.n_dof)
        for term in self.load_terms:
            b += term.coeff(t) * term.vector
        return b

    def system_at(self, t, dt):
        return system_at(self, t, dt)

    def initial_state(self):
        return self.spec.initial_values(self.nodes)

    def m_norm(self, u):
        return math.sqrt(max(float(u @ (self.mass @ u)), 0.0))

    def _with_data(self, data):
        return sp.csr_matrix((data, self.mass.indices, self.mass.indptr),
                             shape=self.mass.shape)


def system_at(system, t, dt):
    """Implicit Euler matrix and load at time ``t`` for step ``dt``.

    Returns ``(A, b)`` with ``A = M + dt * sum_j alpha_j(t) A_j`` and
    ``b = dt * sum_j beta_j(t) b_j``.
    """
    if not dt > 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}", field="dt")
    if system.operator_terms:
        acc = system.operator_terms[0].coeff(t) * system.operator_terms[0].matrix.data
        for term in system.operator_terms[1:]:
            acc = acc + term.coeff(t) * term.matrix.data
        data = system.mass.data + dt * acc
    else:
        data = system.mass.data.copy()
    b = dt * system.load(t)
    return system._with_data(data), b


# -- velocity fields ---------------------------------------------------------

def velocity_field(kind, x, t, w=1.0):
    """Evaluate the 3-D Kolmogorov or ABC velocity at point(s) ``x``.

    ``x`` has shape ``(3,)`` or ``(n, 3)``; the result has the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    kind = kind.lower()
    if kind == "kolmogorov":
        c = math.cos(t)
        comps = (np.cos(Y) + np.sin(Z) * c,
                 np.cos(Z) + np.sin(X) * c,
                 np.cos(X) + np.sin(Y) * c)
    elif kind == "abc":
        s = math.sin(w * t)
        comps = (np.sin(Z + s) + np.cos(Y + s),
                 np.sin(X + s) + np.cos(Z + s),
                 np.sin(Y + s) + np.cos(X + s))
    else:
        raise ValueError(f"unknown velocity field {kind!r}")
    return np.stack(comps, axis=-1)


def forcing_field(kind, x, t, w=1.0):
    """Right-hand side paired with :func:`velocity_field`."""
    x = np.asarray(x, dtype=np.float64)
    Y, Z = x[..., 1], x[..., 2]
    kind = kind.lower()
    if kind == "kolmogorov":
        return -np.cos(Y) - np.sin(Z) * math.cos(t)
    if kind == "abc":
        s = math.sin(w * t)
        return -np.sin(Z + s) - np.cos(Y + s)
    raise ValueError(f"unknown forcing field {kind!r}")


def embed_points(points):
    """Map ``(n, d)`` points to the 3-D coordinates used by the field formulas."""
    points = np.asarray(points, dtype=np.float64)
    d = points.shape[1]
    if d == 3:
        return points
    if d == 2:
        return np.column_stack([points[:, 0], points[:, 1], np.zeros(len(points))])
    return np.column_stack([points[:, 0]] * 3)


def _one(t):
    return 1.0


def _separable_fields(spec):
    """Return ``(velocity_terms, forcing_terms)`` as (name, fn(points), fn(t))."""
    d = spec.dim
    if spec.field_kind == "custom":
        vel = [(f"advection_{i}", fx, ft) for i, (fx, ft) in enumerate(spec.velocity_terms)]
        frc = [(f"forcing_{i}", fx, ft) for i, (fx, ft) in enumerate(spec.forcing_terms)]
        return vel, frc

    if spec.field_kind == "kolmogorov":
        def b_steady(p):
            X, Y, Z = embed_points(p).T
            return np.column_stack([np.cos(Y), np.cos(Z), np.cos(X)])[:, :d]

        def b_osc(p):
            X, Y, Z = embed_points(p).T
            return np.column_stack([np.sin(Z), np.sin(X), np.sin(Y)])[:, :d]

        def f_steady(p):
            return -np.cos(embed_points(p)[:, 1])

        def f_osc(p):
            return -np.sin(embed_points(p)[:, 2])

        vel = [("advection_steady", b_steady, _one), ("advection_cos", b_osc, math.cos)]
        frc = [("forcing_steady", f_steady, _one), ("forcing_cos", f_osc, math.cos)]
        return vel, frc

    # ABC: with s = sin(w t), sin(a + s) and cos(a + s) split into
    # cos(s) * (...) + sin(s) * (...), which makes B and f time-separable.
    w = spec.abc_frequency

    def cos_s(t):
        return math.cos(math.sin(w * t))

    def sin_s(t):
        return math.sin(math.sin(w * t))

    def b_cos(p):
        X, Y, Z = embed_points(p).T
        return np.column_stack([np.sin(Z) + np.cos(Y),
                                np.sin(X) + np.cos(Z),
                                np.sin(Y) + np.cos(X)])[:, :d]

    def b_sin(p):
        X, Y, Z = embed_points(p).T
        return np.column_stack([np.cos(Z) - np.sin(Y),
                                np.cos(X) - np.sin(Z),
                                np.cos(Y) - np.sin(X)])[:, :d]

    def f_cos(p):
        _, Y, Z = embed_points(p).T
        return -(np.sin(Z) + np.cos(Y))

    def f_sin(p):
        _, Y, Z = embed_points(p).T
        return -(np.cos(Z) - np.sin(Y))

    vel = [("advection_cos_s", b_cos, cos_s), ("advection_sin_s", b_sin, sin_s)]
    frc = [("forcing_cos_s", f_cos, cos_s), ("forcing_sin_s", f_sin, sin_s)]
    return vel, frc


# -- assembly ----------------------------------------------------------------

def _grid(resolution, length):
    resolution = tuple(int(r) for r in resolution)
    spacing = tuple(length / r for r in resolution)
    idx = np.indices(resolution).reshape(len(resolution), -1).T
    nodes = idx * np.asarray(spacing)
    return resolution, spacing, idx, nodes


def _q1_reference(d):
    g = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
    corners = np.array(list(itertools.product((0, 1), repeat=d)))
    qpts = np.array(list(itertools.product(g, repeat=d)))
    weights = np.full(len(qpts), 0.5 ** d)
    vals = np.where(corners[None, :, :] == 1, qpts[:, None, :], 1.0 - qpts[:, None, :])
    phi = vals.prod(axis=2)
    sign = np.where(corners == 1, 1.0, -1.0)
    dphi = np.empty(vals.shape)
    for a in range(d):
        others = np.delete(vals, a, axis=2).prod(axis=2)
        dphi[:, :, a] = sign[None, :, a] * others
    return corners, qpts, weights, phi, dphi


def _assemble_fe(resolution, spacing, idx, velocities, reaction):
    d = len(resolution)
    shape = np.array(resolution)
    corners, qpts, weights, phi, dphi_ref = _q1_reference(d)
    dphi = dphi_ref / np.asarray(spacing)[None, None, :]
    jac = float(np.prod(spacing))
    wj = weights * jac

    conn = np.ravel_multi_index(
        ((idx[:, None, :] + corners[None, :, :]) % shape).transpose(2, 0, 1), resolution)
    rows = np.broadcast_to(conn[:, :, None], conn.shape + (conn.shape[1],)).ravel()
    cols = np.broadcast_to(conn[:, None, :], conn.shape + (conn.shape[1],)).ravel()
    n_el = conn.shape[0]
    n = int(np.prod(resolution))

    def build(local):
        if local.ndim == 2:
            local = np.broadcast_to(local, (n_el,) + local.shape)
        return rows, cols, local.ravel()

    mass = build(np.einsum("q,qi,qj->ij", wj, phi, phi))
    terms = [("diffusion", build(np.einsum("q,qia,qja->ij", wj, dphi, dphi)))]
    qx = (idx[:, None, :] + qpts[None, :, :]) * np.asarray(spacing)
    flat_q = qx.reshape(-1, d)
    for name, bfun, _ in velocities:
        B = np.asarray(bfun(flat_q), dtype=np.float64).reshape(n_el, len(qpts), d)
        terms.append((name, build(np.einsum("q,qi,eqa,qja->eij", wj, phi, B, dphi))))
    if reaction != 0.0:
        r, c, v = mass
        terms.append(("reaction", (r, c, reaction * v)))
    return n, mass, terms


def _assemble_fd(resolution, spacing, idx, nodes, velocities, reaction):
    d = len(resolution)
    shape = np.array(resolution)
    n = int(np.prod(resolution))
    vol = float(np.prod(spacing))
    diag = np.arange(n)

    def neighbour(a, step):
        shifted = idx.copy()
        shifted[:, a] = (shifted[:, a] + step) % shape[a]
        return np.ravel_multi_index(shifted.T, resolution)

    plus = [neighbour(a, 1) for a in range(d)]
    minus = [neighbour(a, -1) for a in range(d)]

    mass = (diag, diag, np.full(n, vol))
    r, c, v = [], [], []
    for a in range(d):
        s = vol / spacing[a] ** 2
        r += [diag, diag, diag]
        c += [diag, plus[a], minus[a]]
        v += [np.full(n, 2.0 * s), np.full(n, -s), np.full(n, -s)]
    terms = [("diffusion", (np.concatenate(r), np.concatenate(c), np.concatenate(v)))]
    for name, bfun, _ in velocities:
        B = np.asarray(bfun(nodes), dtype=np.float64).reshape(n, d)
        r, c, v = [], [], []
        for a in range(d):
            s = vol * B[:, a] / (2.0 * spacing[a])
            r += [diag, diag]
            c += [plus[a], minus[a]]
            v += [s, -s]
        terms.append((name, (np.concatenate(r), np.concatenate(c), np.concatenate(v))))
    if reaction != 0.0:
        terms.append(("reaction", (diag, diag, np.full(n, reaction * vol))))
    return n, mass, terms


def _align(n, triplets):
    """Convert COO triplets to CSR matrices sharing one sorted sparsity pattern."""
    all_r = np.concatenate([t[0] for t in triplets])
    all_c = np.concatenate([t[1] for t in triplets])
    pattern = sp.coo_matrix((np.zeros(len(all_r)), (all_r, all_c)), shape=(n, n)).tocsr()
    pattern.sum_duplicates()
    out = []
    for r, c, v in triplets:
        m = sp.coo_matrix(
            (np.concatenate([v, np.zeros(len(all_r))]),
             (np.concatenate([r, all_r]), np.concatenate([c, all_c]))),
            shape=(n, n)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        if not (np.array_equal(m.indptr, pattern.indptr)
                and np.array_equal(m.indices, pattern.indices)):
            raise AssemblyError("sparsity patterns failed to align")
        out.append(m)
    return out


def build_grid(spec, resolution, scheme=None):
    """Assemble the periodic discrete system for ``spec``.

    Parameters
    ----------
    spec : ProblemSpec
    resolution : int or sequence of int
        Nodes per axis (periodic, no duplicated boundary node). A scalar is
        repeated ``spec.dim`` times.
    scheme : {"fe", "fd"}, optional
        Defaults to ``"fe"`` for ``dim <= 2`` and ``"fd"`` in 3-D.

    Returns
    -------
    DiscreteSystem
    """
    if np.isscalar(resolution):
        resolution = (int(resolution),) * spec.dim
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != spec.dim:
        raise ConfigurationError(
            f"resolution {resolution} does not match dim={spec.dim}", field="resolution")
    if min(resolution) < 4:
        raise ConfigurationError(f"resolution must be >= 4 per axis, got {resolution}",
                                 field="resolution")
    if scheme is None:
        scheme = "fe" if spec.dim <= 2 else "fd"
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}", field="scheme")

    resolution, spacing, idx, nodes = _grid(resolution, spec.domain_length)
    velocities, forcings = _separable_fields(spec)
    if scheme == "fe":
        n, mass, terms = _assemble_fe(resolution, spacing, idx, velocities, spec.reaction)
    else:
        n, mass, terms = _assemble_fd(resolution, spacing, idx, nodes, velocities,
                                      spec.reaction)

    matrices = _align(n, [mass] + [t[1] for t in terms])
    for m in matrices:
        if not np.all(np.isfinite(m.data)):
            raise AssemblyError("non-finite coefficient in assembled matrix")
    mass_matrix = matrices[0]

    coeffs = {"diffusion": lambda t, e=spec.diffusion: e, "reaction": _one}
    coeffs.update({name: tf for name, _, tf in velocities})
    operator_terms = tuple(
        OperatorTerm(name, mat, coeffs[name]) for (name, _), mat in zip(terms, matrices[1:]))

    load_terms = []
    for name, ffun, tf in forcings:
        values = spec.forcing_scale * np.asarray(ffun(nodes), dtype=np.float64).reshape(n)
        if not np.all(np.isfinite(values)):
            raise AssemblyError(f"non-finite forcing values in {name}")
        load_terms.append(LoadTerm(name, mass_matrix @ values, tf))

    return DiscreteSystem(mass=mass_matrix, operator_terms=operator_terms,
                          load_terms=tuple(load_terms), resolution=resolution,
                          spacing=spacing, nodes=nodes, scheme=scheme, spec=spec)
