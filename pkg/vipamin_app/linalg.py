"""
Dense linear algebra primitives.

Matrices are C-contiguous float64 numpy arrays. Every function is pure.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ParameterError, SvdConvergenceError, DegenerateRowWarning

log = logging.getLogger(__name__)

RANK_RTOL = 1e-12
ZERO_NORM = 1e-12


def as_matrix(a, name="matrix"):
    """
    Validates and converts to a finite, 2-d float64 array.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ParameterError("%s must be 2-d, got shape %s" % (name, a.shape))
    if not np.all(np.isfinite(a)):
        raise ParameterError("%s has non-finite entries" % name)
    return a


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray
    numerical_rank: int

    def truncated(self):
        """
        Returns (u, s, v) restricted to the numerical rank.
        """
        r = self.numerical_rank
        return self.u[:, :r], self.singular_values[:r], self.v[:, :r]


def rank_threshold(shape, sigma_max):
    return max(shape) * sigma_max * RANK_RTOL


def svd(a):
    """
    Thin SVD, A = U diag(s) V^T, with right singular vectors as the columns of v.

    Tries the divide-and-conquer driver first and falls back to the QR iteration
    driver; raises SvdConvergenceError if both fail.
    """
    a = as_matrix(a)
    if a.size == 0:
        raise ParameterError("svd of an empty matrix")
    try:
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        log.warning("gesdd did not converge for %s matrix, retrying with gesvd", a.shape)
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as e:
            raise SvdConvergenceError("SVD did not converge for %s matrix: %s" % (a.shape, e))
    sigma_max = s[0] if len(s) else 0.0
    rank = int(np.sum(s > rank_threshold(a.shape, sigma_max)))
    return SvdResult(u=u, singular_values=s, v=vt.T.copy(), numerical_rank=rank)


def pseudoinverse(a):
    """
    Moore-Penrose pseudoinverse, truncated at the svd rank threshold.
    """
    u, s, v = svd(a).truncated()
    return (v / s) @ u.T


def softmax_rows(a):
    """
    Row-wise softmax with per-row max subtraction. Works on any array over its last axis.
    """
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def degenerate_rows(a):
    """
    Indices of the rows of a with norm below ZERO_NORM.
    """
    return np.flatnonzero(np.linalg.norm(a, axis=-1) < ZERO_NORM)


def normalize_rows(a):
    """
    Scales each row to unit norm; rows below ZERO_NORM become zero.
    """
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    return np.where(norms < ZERO_NORM, 0.0, a / safe)


def cosine_rows(a, b):
    """
    Cosine similarity between every row of a and every row of b.

    Zero-norm rows produce zero similarity and raise a DegenerateRowWarning.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ParameterError("column mismatch: %s vs %s" % (a.shape, b.shape))
    bad_a = degenerate_rows(a)
    bad_b = degenerate_rows(b)
    if len(bad_a) or len(bad_b):
        msg = "zero-norm rows in cosine similarity (a: %s, b: %s)" % (list(bad_a), list(bad_b))
        log.warning(msg)
        warnings.warn(msg, DegenerateRowWarning, stacklevel=2)
    return normalize_rows(a) @ normalize_rows(b).T


def top_k_indices(scores, k):
    """
    Indices of the k largest scores, ordered by descending score then ascending index.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= len(scores):
        raise ParameterError("k=%s out of range for %s scores" % (k, len(scores)))
    # Stable sort keeps ascending index among ties.
    return np.argsort(-scores, kind="stable")[:k]


def row_top_k_indices(scores, k):
    """
    top_k_indices applied to every row of a score matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[-1]:
        raise ParameterError("k=%s out of range for %s columns" % (k, scores.shape[-1]))
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def projector_onto_colspace(b):
    """
    Orthogonal projector onto the column space of b, via the rank-truncated SVD.

    Equals B (B^T B)^-1 B^T when b has full column rank.
    """
    u, _, _ = svd(b).truncated()
    return u @ u.T


def orthonormal_basis(b, dim=None):
    """
    Orthonormal basis of the column space of b (left singular vectors), optionally
    restricted to the leading dim directions.
    """
    result = svd(b)
    r = result.numerical_rank if dim is None else dim
    if r > result.numerical_rank:
        raise ParameterError("requested %s directions but numerical rank is %s" % (r, result.numerical_rank))
    return result.u[:, :r]
