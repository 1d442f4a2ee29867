"""M-weighted proper orthogonal decomposition.

Modes come from the method of snapshots: the symmetric eigenproblem of the
Gram matrix ``W^T M W`` gives eigenpairs ``(lambda_i, y_i)`` and modes
``r_i = W y_i / sqrt(lambda_i)``.  The basis dimension is the smallest ``m``
for which the leading ``sqrt(lambda_i)`` sum to at least ``energy`` times their
total.
"""

import struct
import threading

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (ConsistencyError, DegenerateInputError, DimensionMismatchError,
                         EmptySpectrumError, SnapshotDataError)

BASIS_MAGIC = b"PODB"
BASIS_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def _mass_or_identity(mass, n):
    if mass is None:
        return sp.identity(n, format="csr")
    if mass.shape != (n, n):
        raise DimensionMismatchError(f"mass shape {mass.shape} does not match N_g={n}")
    return mass


def truncation_rank(sqrt_eigvals, energy):
    """Smallest ``m`` whose prefix sum of ``sqrt_eigvals`` reaches ``energy`` of the total."""
    csum = np.cumsum(sqrt_eigvals)
    hits = np.nonzero(csum >= energy * csum[-1])[0]
    return int(hits[0]) + 1 if len(hits) else len(sqrt_eigvals)


def m_orthonormalize(R, mass, passes=2, drop_tol=1e-14):
    """Modified Gram-Schmidt in the M inner product, repeated ``passes`` times.

    Columns whose norm collapses below ``drop_tol`` relative to their input
    norm are dropped; returns the orthonormal columns and the kept indices.
    """
    Q = np.array(R, dtype=np.float64, copy=True)
    keep = []
    for j in range(Q.shape[1]):
        v = Q[:, j]
        start = np.sqrt(max(v @ (mass @ v), 0.0))
        for _ in range(passes):
            for i in keep:
                v -= (Q[:, i] @ (mass @ v)) * Q[:, i]
        nrm = np.sqrt(max(v @ (mass @ v), 0.0))
        if start == 0.0 or nrm <= drop_tol * start:
            continue
        Q[:, j] = v / nrm
        keep.append(j)
    return Q[:, keep], keep


class PODBasis(TransformerMixin, BaseEstimator):
    """POD basis estimator with M-orthonormal modes.

    Follows the scikit-learn convention that ``X`` holds one snapshot per
    row, so ``fit(W.T)`` for an ``N_g x n_s`` snapshot matrix ``W``.
    ``transform`` returns reduced coordinates ``X M R`` and
    ``inverse_transform`` lifts them back with ``Z R^T``.

    Parameters
    ----------
    energy : float
        Energy fraction ``gamma`` in ``(0, 1]`` for the truncation rule.
    rank_tol : float
        Eigenvalues below ``rank_tol * lambda_1`` are discarded as numerical zeros.
    ortho_tol : float
        If ``max|R^T M R - I|`` exceeds this after construction, the modes are
        re-orthonormalized with M-weighted Gram-Schmidt.

    Attributes
    ----------
    modes_ : ndarray of shape (n_dof, m)
    singular_values_ : ndarray of shape (m,)
        ``sqrt(lambda_i)`` of the kept modes. An augmentation column carries the
        M-norm of the residual it was built from, capped at the smallest
        POD value so the sequence stays non-increasing.
    eigenvalues_ : ndarray
        The full retained spectrum above the rank cut.
    n_components_ : int
    energy_fraction_ : float
    augmented_ : bool
    origin_ : dict
    """

    def __init__(self, energy=1.0, rank_tol=1e-12, ortho_tol=1e-10):
        self.energy = energy
        self.rank_tol = rank_tol
        self.ortho_tol = ortho_tol

    def fit(self, X, y=None, mass=None, origin=None):
        if not (0.0 < self.energy <= 1.0):
            raise ValueError(f"energy must lie in (0, 1], got {self.energy}")
        try:
            X = check_array(X, dtype=np.float64)
        except ValueError as exc:
            raise SnapshotDataError(str(exc)) from exc
        W = X.T
        M = _mass_or_identity(mass, W.shape[0])

        gram = W.T @ (M @ W)
        gram = 0.5 * (gram + gram.T)
        lam, Y = np.linalg.eigh(gram)
        lam, Y = lam[::-1], Y[:, ::-1]
        if not lam[0] > 0.0:
            raise EmptySpectrumError("snapshot Gram matrix has no positive eigenvalue")
        r = int(np.count_nonzero(lam > self.rank_tol * lam[0]))
        lam, Y = lam[:r], Y[:, :r]
        sqrt_lam = np.sqrt(lam)
        m = truncation_rank(sqrt_lam, self.energy)

        modes = (W @ Y[:, :m]) / sqrt_lam[:m]
        if _ortho_error(modes, M) > self.ortho_tol:
            modes, kept = m_orthonormalize(modes, M)
            sqrt_keep = sqrt_lam[:m][kept]
            if not kept:
                raise EmptySpectrumError("no mode survived M-orthonormalization")
        else:
            sqrt_keep = sqrt_lam[:m]

        self.modes_ = modes
        self.singular_values_ = sqrt_keep
        self.eigenvalues_ = lam
        self.n_components_ = modes.shape[1]
        self.energy_fraction_ = float(np.sum(sqrt_lam[:m]) / np.sum(sqrt_lam))
        self.augmented_ = False
        self.mass_ = mass
        self.origin_ = dict(origin or {})
        self.n_features_in_ = W.shape[0]
        return self

    @classmethod
    def from_modes(cls, modes, singular_values=None, mass=None, origin=None, **params):
        """Wrap an existing M-orthonormal mode matrix as a fitted basis."""
        est = cls(**params)
        modes = np.asarray(modes, dtype=np.float64)
        if modes.ndim == 1:
            modes = modes[:, None]
        est.modes_ = modes
        if singular_values is None:
            singular_values = np.ones(modes.shape[1])
        est.singular_values_ = np.asarray(singular_values, dtype=np.float64)
        est.eigenvalues_ = est.singular_values_ ** 2
        est.n_components_ = modes.shape[1]
        est.energy_fraction_ = 1.0
        est.augmented_ = False
        est.mass_ = mass
        est.origin_ = dict(origin or {})
        est.n_features_in_ = modes.shape[0]
        return est

    def _mass(self):
        return _mass_or_identity(self.mass_, self.modes_.shape[0])

    def transform(self, X):
        check_is_fitted(self, "modes_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return (self._mass() @ X.T).T @ self.modes_

    def inverse_transform(self, Z):
        check_is_fitted(self, "modes_")
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return Z @ self.modes_.T

    def orthonormality_error(self):
        check_is_fitted(self, "modes_")
        return _ortho_error(self.modes_, self._mass())

    def augment(self, U, tol=1e-12):
        """Return a basis whose span also contains ``U``.

        The M-orthogonal residual ``U - R R^T M U`` (orthogonalized twice) is
        normalized and appended as a new last column; when it is negligible the
        modes are kept as they are.
        """
        check_is_fitted(self, "modes_")
        M = self._mass()
        R = self.modes_
        U = np.asarray(U, dtype=np.float64)
        if U.shape != (R.shape[0],):
            raise DimensionMismatchError(f"U has shape {U.shape}, expected ({R.shape[0]},)")
        u_norm = np.sqrt(max(U @ (M @ U), 0.0))
        if u_norm == 0.0:
            raise DegenerateInputError("cannot augment with a vector of zero M-norm")
        d = U - R @ (R.T @ (M @ U))
        res_norm = np.sqrt(max(d @ (M @ d), 0.0))
        new = PODBasis.from_modes(R, self.singular_values_, mass=self.mass_,
                                  origin=self.origin_, **self.get_params())
        new.energy_fraction_ = self.energy_fraction_
        new.augmented_ = True
        if res_norm <= tol * u_norm:
            return new
        d -= R @ (R.T @ (M @ d))
        d /= np.sqrt(d @ (M @ d))
        new.modes_ = np.column_stack([R, d])
        sv = min(res_norm, self.singular_values_[-1]) if len(self.singular_values_) else res_norm
        new.singular_values_ = np.append(self.singular_values_, sv)
        new.eigenvalues_ = np.append(self.eigenvalues_, sv ** 2)
        new.n_components_ = R.shape[1] + 1
        return new

    def save(self, path):
        write_basis(path, self.modes_, self.singular_values_)


def _ortho_error(R, M):
    G = R.T @ (M @ R)
    return float(np.max(np.abs(G - np.eye(G.shape[0])))) if G.size else 0.0


def pod_modes(W, gamma, mass=None, origin=None, rank_tol=1e-12):
    """Fit a :class:`PODBasis` to the columns of ``W`` with energy fraction ``gamma``.

    ``W`` may be an ``N_g x n_s`` array or a :class:`SnapshotMatrix`.
    """
    cols = getattr(W, "columns", W)
    return PODBasis(energy=gamma, rank_tol=rank_tol).fit(
        np.asarray(cols).T, mass=mass, origin=origin)


def augment(basis, U, mass=None):
    """Functional form of :meth:`PODBasis.augment`."""
    if mass is not None and basis.mass_ is None:
        basis = PODBasis.from_modes(basis.modes_, basis.singular_values_, mass=mass,
                                    origin=basis.origin_)
    return basis.augment(U)


class BasisStore:
    """Per-(iteration, subinterval) pre-window POD modes.

    Each key is written exactly once; reads are safe from any thread.
    """

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def put(self, k, n, modes):
        with self._lock:
            if (k, n) in self._data:
                raise ConsistencyError(f"basis for (k={k}, n={n}) already stored")
            self._data[(k, n)] = modes

    def get(self, k, n):
        try:
            return self._data[(k, n)]
        except KeyError:
            raise ConsistencyError(f"no stored basis for (k={k}, n={n})") from None

    def __contains__(self, key):
        return key in self._data

    def __len__(self):
        return len(self._data)

    def keys(self):
        return sorted(self._data)

    def evict_before(self, k_min):
        """Drop all entries from iterations ``< k_min``."""
        with self._lock:
            for key in [key for key in self._data if key[0] < k_min]:
                del self._data[key]


def window_members(n, k, m_l, p):
    """Keys ``(iteration, subinterval)`` in window order, clamped at n=0 and k=1."""
    left = [(k, j) for j in range(max(0, n - m_l), n + 1)]
    prev = [(i, n) for i in range(k - 1, max(1, k - p) - 1, -1)]
    return left + prev


def assemble_window(store, n, k, m_l, p):
    """Concatenate stored modes of the left neighbours and previous iterations."""
    if k < 1:
        raise ValueError("windows are defined for k >= 1")
    blocks = [np.asarray(getattr(store.get(*key), "modes_", store.get(*key)))
              for key in window_members(n, k, m_l, p)]
    return np.hstack(blocks)


def write_basis(path, modes, singular_values):
    """Write a basis dump: header, column-major modes, then singular values."""
    modes = np.asarray(modes, dtype="<f8")
    sv = np.asarray(singular_values, dtype="<f8")
    n_dof, m = modes.shape
    if sv.shape != (m,):
        raise DimensionMismatchError("need one singular value per mode")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, n_dof, m))
        fh.write(modes.tobytes(order="F"))
        fh.write(sv.tobytes())


def read_basis(path):
    """Read a basis dump written by :func:`write_basis`; returns ``(modes, sv)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated basis file")
    magic, version, n_dof, m = _HEADER.unpack_from(raw)
    if magic != BASIS_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != BASIS_VERSION:
        raise ValueError(f"unsupported basis file version {version}")
    expected = _HEADER.size + 8 * (n_dof * m + m)
    if len(raw) != expected:
        raise ValueError(f"basis file has {len(raw)} bytes, expected {expected}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    modes = body[: n_dof * m].reshape((n_dof, m), order="F").copy()
    return modes, body[n_dof * m:].copy()
