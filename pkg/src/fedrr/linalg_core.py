"""Update buffers, truncated uncentered PCA and the factored residual kernel.

Parameter vectors are plain 1-D ``float64`` numpy arrays of length ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-8
# cumulative-variance comparisons absorb round-off at this level
_PROFILE_SLACK = 1e-12


def as_param_vector(values, p: int | None = None) -> np.ndarray:
    """Validate and convert ``values`` into a finite 1-D float64 vector."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"parameter vector must be 1-D and nonempty, got shape {vec.shape}")
    if p is not None and vec.size != p:
        raise ValueError(f"dimension mismatch: expected length {p}, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("invalid update: non-finite entries")
    return vec


class UpdateBuffer:
    """Column store for the Phase I update matrix.

    Columns are appended round by round; once ``capacity`` columns are held the
    buffer is full and further appends are rejected.
    """

    def __init__(self, p: int, capacity: int):
        if p <= 0:
            raise ValueError("p must be positive")
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.p = int(p)
        self.capacity = int(capacity)
        self._data = np.empty((self.p, self.capacity), dtype=np.float64)
        self._n = 0

    @classmethod
    def from_columns(cls, columns, capacity: int | None = None) -> "UpdateBuffer":
        cols = [np.asarray(c, dtype=np.float64) for c in columns]
        if not cols:
            raise ValueError("no Phase I data")
        buf = cls(cols[0].size, capacity or len(cols))
        for c in cols:
            buf.append(c)
        return buf

    def append(self, delta) -> None:
        if self._n >= self.capacity:
            raise ValueError(f"update buffer is full ({self.capacity} columns)")
        vec = np.asarray(delta, dtype=np.float64)
        if vec.shape != (self.p,):
            raise ValueError(f"dimension mismatch: expected length {self.p}, got shape {vec.shape}")
        self._data[:, self._n] = vec
        self._n += 1

    def extend(self, deltas) -> None:
        for d in deltas:
            self.append(d)

    def __len__(self) -> int:
        return self._n

    @property
    def full(self) -> bool:
        return self._n == self.capacity

    @property
    def matrix(self) -> np.ndarray:
        """The ``p x n`` matrix of collected columns (a read-only view)."""
        view = self._data[:, : self._n]
        view.flags.writeable = False
        return view

    def head(self, n_columns: int) -> np.ndarray:
        return self.matrix[:, :n_columns]


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal ``p x q`` basis of the leading principal directions."""

    basis: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        s = np.asarray(self.singular_values, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] == 0:
            raise ValueError("basis must be a p x q matrix with q >= 1")
        if s.shape != (b.shape[1],):
            raise ValueError("need one singular value per basis column")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        gram = b.T @ b
        if not np.allclose(gram, np.eye(b.shape[1]), rtol=0.0, atol=ORTHONORMAL_TOL):
            raise ValueError("basis columns are not orthonormal")
        b.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "singular_values", s)

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def q(self) -> int:
        return self.basis.shape[1]

    def project(self, delta: np.ndarray) -> np.ndarray:
        """``B (B^T delta)``; never forms the ``p x p`` projector."""
        return self.basis @ (self.basis.T @ delta)


def _checked_matrix(buffer: UpdateBuffer | np.ndarray) -> np.ndarray:
    mat = buffer.matrix if isinstance(buffer, UpdateBuffer) else np.asarray(buffer, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] == 0 or mat.shape[0] == 0:
        raise ValueError("no Phase I data")
    if not np.all(np.isfinite(mat)):
        raise ValueError("invalid update: non-finite entries")
    return mat


def _cumulative_fraction(singular_values: np.ndarray) -> np.ndarray:
    energy = singular_values**2
    total = energy.sum()
    if total == 0.0:
        raise ValueError("all updates are zero; explained variance is undefined")
    cum = np.cumsum(energy) / total
    cum[-1] = 1.0
    return cum


def _significant(s: np.ndarray, shape: tuple[int, int], from_gram: bool = False) -> np.ndarray:
    """Drop singular values that are round-off relative to the largest.

    Values recovered from Gram eigenvalues carry absolute error near
    ``sqrt(eps) * s[0]``, so their cut-off is the square root of the SVD one.
    """
    if s[0] == 0.0:
        return s
    rel = np.finfo(np.float64).eps * max(shape)
    return s[s > s[0] * (np.sqrt(rel) if from_gram else rel)]


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # deterministic orientation: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def _gram_eig(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Singular values (descending) and right singular vectors via ``W^T W``."""
    evals, v = np.linalg.eigh(mat.T @ mat)
    evals, v = evals[::-1], v[:, ::-1]
    return np.sqrt(np.clip(evals, 0.0, None)), v


def _leading_factors(mat: np.ndarray, variance_target: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(u_q, s_q, s_all)`` for the smallest ``q`` reaching ``variance_target``."""
    p, n = mat.shape
    if p >= 4 * n:
        # n x n eigenproblem; only the q kept columns are lifted back to R^p
        s_all, v = _gram_eig(mat)
        s_all = _significant(s_all, mat.shape, from_gram=True)
        q = components_for(_cumulative_fraction(s_all), variance_target)
        u = (mat @ v[:, :q]) / s_all[:q]
        if np.allclose(u.T @ u, np.eye(q), rtol=0.0, atol=1e-10):
            return u, s_all[:q], s_all
    u, s_all, _ = np.linalg.svd(mat, full_matrices=False)
    s_all = _significant(s_all, mat.shape)
    q = components_for(_cumulative_fraction(s_all), variance_target)
    return u[:, :q], s_all[:q], s_all


def pca_with_profile(buffer: UpdateBuffer | np.ndarray, variance_target: float = 0.95) -> tuple[SubspaceBasis, np.ndarray]:
    """:func:`truncated_pca` and :func:`explained_variance_profile` from one decomposition."""
    if not 0.0 < variance_target <= 1.0:
        raise ValueError("variance_target must lie in (0, 1]")
    mat = _checked_matrix(buffer)
    u, s, s_all = _leading_factors(mat, variance_target)
    return SubspaceBasis(_fix_signs(u), s.copy()), _cumulative_fraction(s_all)


def truncated_pca(buffer: UpdateBuffer | np.ndarray, variance_target: float = 0.95) -> SubspaceBasis:
    """Leading left singular vectors of the uncentered update matrix.

    ``q`` is the smallest count whose cumulative squared-singular-value share
    reaches ``variance_target``.  Tall matrices (``p >= 4n``) go through the
    ``n x n`` Gram matrix; otherwise a thin SVD is used.  Neither path builds
    a ``p x p`` object.
    """
    return pca_with_profile(buffer, variance_target)[0]


def project_residual(delta, basis: SubspaceBasis) -> float:
    """Euclidean length of ``delta - B (B^T delta)``."""
    vec = np.asarray(delta, dtype=np.float64)
    if vec.shape != (basis.p,):
        raise ValueError(f"dimension mismatch: delta has shape {vec.shape}, basis has {basis.p} rows")
    coeffs = basis.basis.T @ vec
    resid = vec - basis.basis @ coeffs
    norm = float(np.linalg.norm(resid))
    # guard the bound r <= ||delta|| against round-off
    return min(norm, float(np.linalg.norm(vec)))


def explained_variance_profile(buffer: UpdateBuffer | np.ndarray) -> np.ndarray:
    """Cumulative share of squared singular value mass, one entry per nonzero component."""
    mat = _checked_matrix(buffer)
    if mat.shape[0] >= 4 * mat.shape[1]:
        return _cumulative_fraction(_significant(_gram_eig(mat)[0], mat.shape, from_gram=True))
    s = np.linalg.svd(mat, compute_uv=False)
    return _cumulative_fraction(_significant(s, mat.shape))


def components_for(profile: np.ndarray, fraction: float) -> int:
    """Number of components needed for ``fraction`` of the variance."""
    k = int(np.searchsorted(profile, fraction - _PROFILE_SLACK, side="left")) + 1
    return min(k, len(profile))


def gram_profiles(buffer: UpdateBuffer | np.ndarray, column_counts) -> list[np.ndarray]:
    """Variance profiles of several leading column prefixes from one Gram matrix.

    The ``n x n`` Gram matrix ``W^T W`` shares its nonzero eigenvalues with the
    squared singular values of ``W``; each prefix needs only its leading block,
    so the ``p``-dimensional work is done once.
    """
    mat = _checked_matrix(buffer)
    gram = mat.T @ mat
    out = []
    for n in column_counts:
        if not 1 <= n <= mat.shape[1]:
            raise ValueError(f"prefix of {n} columns out of range")
        eig = np.linalg.eigvalsh(gram[:n, :n])[::-1]
        s = np.sqrt(np.clip(eig, 0.0, None))
        out.append(_cumulative_fraction(_significant(s, (mat.shape[0], n), from_gram=True)))
    return out
