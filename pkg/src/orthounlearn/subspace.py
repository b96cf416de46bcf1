"""Orthonormal feature subspaces built from activation matrices.

Activation matrices are stored with one sample per column (``d x n``), so the
basis of a subspace is a set of leading left singular vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroMatrix

DEFAULT_EPSILON = 0.99
EXPANSION_RULES = ("cumulative", "residual")
# ||R_hat||_F below this fraction of ||R_new||_F means no new directions
DEGENERATE_RTOL = 1e-10
_SIGN_TOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray


@dataclass(frozen=True, eq=False)
class Subspace:
    """A ``d x k`` column-orthonormal basis plus the threshold that produced it."""

    basis: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    layer_id: str = ""
    _proj: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        basis = np.array(self.basis, dtype=float)
        if basis.ndim != 2:
            raise DimensionMismatch(f"basis must be 2-D, got shape {basis.shape}")
        if basis.shape[1] > basis.shape[0]:
            raise DimensionMismatch("basis has more columns than rows")
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)

    @classmethod
    def empty(cls, dim: int, epsilon: float = DEFAULT_EPSILON, layer_id: str = "") -> Subspace:
        return cls(np.zeros((dim, 0)), epsilon, layer_id)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def projector(self) -> np.ndarray:
        """The ``d x d`` orthogonal projector ``B Bᵀ`` (cached)."""
        if self._proj is None:
            proj = self.basis @ self.basis.T
            proj.setflags(write=False)
            object.__setattr__(self, "_proj", proj)
        return self._proj

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "epsilon": self.epsilon,
            "layer_id": self.layer_id,
            "k": self.k,
            "basis": self.basis.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Subspace:
        dim = int(doc["dim"])
        flat = np.asarray(doc["basis"], dtype=float)
        if dim <= 0 or flat.size % dim:
            raise DimensionMismatch(f"basis of {flat.size} numbers does not fit dim {dim}")
        k = flat.size // dim
        if "k" in doc and int(doc["k"]) != k:
            raise DimensionMismatch(f"declared k={doc['k']} but basis holds {k} columns")
        return cls(flat.reshape(dim, k), float(doc["epsilon"]), str(doc.get("layer_id", "")))


def as_representation(columns) -> np.ndarray:
    """Coerce a ``d x n`` array, or a list of equal-length column vectors, to a float matrix."""
    if isinstance(columns, np.ndarray):
        mat = columns.astype(float, copy=False)
        if mat.ndim == 1:
            mat = mat[:, None]
    else:
        cols = [np.asarray(c, dtype=float).ravel() for c in columns]
        if not cols:
            raise DimensionMismatch("representation matrix has no columns")
        lengths = {c.size for c in cols}
        if len(lengths) != 1:
            raise DimensionMismatch(f"ragged columns with lengths {sorted(lengths)}")
        mat = np.stack(cols, axis=1)
    if mat.ndim != 2:
        raise DimensionMismatch(f"representation must be 2-D, got shape {mat.shape}")
    return mat


def svd(mat: np.ndarray) -> SvdResult:
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    return SvdResult(u, s, vt.T)


def energy_rank(singular_values: np.ndarray, epsilon: float) -> int:
    """Smallest k whose leading squared singular values hold ``epsilon`` of the total."""
    energy = np.cumsum(np.square(singular_values))
    if energy.size == 0 or energy[-1] <= 0:
        return 0
    return int(np.searchsorted(energy, epsilon * energy[-1], side="left")) + 1


def _numerical_rank(singular_values: np.ndarray, shape: tuple[int, int], scale: float) -> int:
    tol = max(shape) * np.finfo(float).eps * scale
    return int(np.count_nonzero(singular_values > tol))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        big = np.flatnonzero(np.abs(col) > _SIGN_TOL)
        if big.size and col[big[0]] < 0:
            out[:, j] = -col
    return out


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")


def _select(mat: np.ndarray, epsilon: float, scale: float) -> np.ndarray:
    res = svd(mat)
    rank = _numerical_rank(res.singular_values, mat.shape, scale)
    sigma = res.singular_values[:rank]
    k = energy_rank(sigma, epsilon)
    return _fix_signs(res.left_vectors[:, :k])


def decompose(R, epsilon: float = DEFAULT_EPSILON, layer_id: str = "") -> Subspace:
    _check_epsilon(epsilon)
    mat = as_representation(R)
    if mat.shape[1] < 1:
        raise DimensionMismatch("representation matrix has no columns")
    if not np.any(mat):
        raise ZeroMatrix("cannot decompose an all-zero representation matrix")
    top = np.linalg.norm(mat, 2)
    return Subspace(_select(mat, epsilon, top), epsilon, layer_id)


def _check_dim(S: Subspace, h: np.ndarray) -> None:
    if h.shape[0] != S.dim:
        raise DimensionMismatch(f"vector of length {h.shape[0]} against subspace of dim {S.dim}")


def project(S: Subspace, h) -> np.ndarray:
    """Component of ``h`` (vector or ``d x n`` matrix) inside ``span(S)``."""
    h = np.asarray(h, dtype=float)
    _check_dim(S, h)
    return S.basis @ (S.basis.T @ h)


def residual(S: Subspace, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return h - project(S, h)


def expand(
    S_old: Subspace, R_new, epsilon: float = DEFAULT_EPSILON, rule: str = "cumulative"
) -> Subspace:
    """Append the new directions of ``R_new`` that ``S_old`` does not already span.

    The old basis is kept verbatim; new vectors are leading left singular
    vectors of ``R_hat = R_new - B Bᵀ R_new``. With ``rule="cumulative"`` the
    count is the smallest h for which the energy of ``R_new`` already captured
    by ``S_old`` plus the first h squared singular values of ``R_hat`` reaches
    ``epsilon * ||R_new||_F^2``. ``rule="residual"`` applies the energy rule to
    the spectrum of ``R_hat`` alone, which admits most of any leftover noise.
    """
    _check_epsilon(epsilon)
    if rule not in EXPANSION_RULES:
        raise ValueError(f"rule must be one of {EXPANSION_RULES}")
    mat = as_representation(R_new)
    if mat.shape[0] != S_old.dim:
        raise DimensionMismatch(f"R_new has dim {mat.shape[0]}, subspace has dim {S_old.dim}")
    if S_old.k == 0:
        return decompose(mat, epsilon, S_old.layer_id)
    new_norm = np.linalg.norm(mat)
    r_hat = mat - S_old.basis @ (S_old.basis.T @ mat)
    if new_norm == 0 or np.linalg.norm(r_hat) <= DEGENERATE_RTOL * new_norm:
        return S_old
    res = svd(r_hat)
    rank = _numerical_rank(res.singular_values, r_hat.shape, np.linalg.norm(mat, 2))
    sigma_sq = np.square(res.singular_values[:rank])
    if rank == 0:
        return S_old
    if rule == "residual":
        h = energy_rank(res.singular_values[:rank], epsilon)
    else:
        total = new_norm**2
        captured = float(np.sum(np.square(S_old.basis.T @ mat)))
        needed = epsilon * total - captured
        if needed <= 0:
            return S_old
        cum = np.cumsum(sigma_sq)
        h = int(np.searchsorted(cum, min(needed, cum[-1]), side="left")) + 1
    added = res.left_vectors[:, :h]
    # second orthogonalization pass against the old basis, then re-normalize
    added = added - S_old.basis @ (S_old.basis.T @ added)
    added, _ = np.linalg.qr(added)
    added = _fix_signs(added)
    return Subspace(np.hstack([S_old.basis, added]), S_old.epsilon, S_old.layer_id)


def span_distance(S1: Subspace, S2: Subspace) -> float:
    """Sine of the largest principal angle between two spans.

    Computed as the spectral norm of the projector difference, which is 1
    whenever the dimensions differ.
    """
    if S1.dim != S2.dim:
        raise DimensionMismatch(f"subspace dims differ: {S1.dim} vs {S2.dim}")
    if S1.k == 0 and S2.k == 0:
        return 0.0
    return float(min(1.0, np.linalg.norm(S1.projector - S2.projector, 2)))


def orthonormality_error(S: Subspace) -> float:
    return float(np.max(np.abs(S.basis.T @ S.basis - np.eye(S.k)), initial=0.0))
