"""Dense factorization primitives used by the doubling iteration.

Pivoted QR with a relative rank cut, block Gram-Schmidt basis extension with
re-orthogonalization, an SVD with a reproducible sign convention, and the
epsilon-truncation split of a singular value sequence.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError


class ConvergenceFailure(NumericalError):
    reason = "svd_convergence"


#: default relative cut for the pivoted-QR rank decision is QR_RANK_SCALE * k * eps
QR_RANK_SCALE = 1.0
#: extend_basis drops a column whose residual is below this fraction of its norm
DROP_TOL = 1e-13


@dataclass
class PivotedQr:
    """Thin pivoted QR ``M[:, perm] ~= Q @ R`` truncated to numerical rank ``p``."""

    Q: np.ndarray
    R: np.ndarray
    perm: np.ndarray
    p: int
    rank_tol: float

    @property
    def R_unpermuted(self):
        """``R P`` in the column order of ``M``, so that ``M ~= Q @ R_unpermuted``."""
        Rp = np.empty_like(self.R)
        Rp[:, self.perm] = self.R
        return Rp

    @property
    def P(self):
        """Permutation matrix with ``M @ P == M[:, perm]``."""
        k = len(self.perm)
        P = np.zeros((k, k))
        P[self.perm, np.arange(k)] = 1.0
        return P


def qr_col_pivot(M, rank_scale=QR_RANK_SCALE):
    """QR factorization with column pivoting and a relative rank cut.

    Columns ``i`` with ``|R_ii| <= rank_scale * k * eps * |R_11|`` are dropped,
    which gives the numerical rank ``p``. Signs are fixed so that ``diag(R) >= 0``.

    Parameters
    ----------
    M : (n, k) array_like
    rank_scale : float
        Multiplier of ``k * eps`` in the rank decision.

    Returns
    -------
    PivotedQr
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] < 1:
        raise ValueError("qr_col_pivot expects a 2-D array with at least one column")
    n, k = M.shape
    Q, R, perm = sla.qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = rank_scale * k * np.finfo(float).eps * (d[0] if d.size else 0.0)
    p = int(np.count_nonzero(d > tol)) if d.size and d[0] > 0 else 0
    Q, R = Q[:, :p], R[:p, :]
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs
    R = R * signs[:, None]
    return PivotedQr(Q=Q, R=R, perm=np.asarray(perm), p=p, rank_tol=tol)


@dataclass
class BasisExtension:
    """``[Q_prev, W] = [Q_prev, Q_new] @ [[I, R12], [0, R2]]``."""

    Q_new: np.ndarray
    R12: np.ndarray
    R2: np.ndarray

    @property
    def R_hat(self):
        r = self.R12.shape[0]
        q = self.Q_new.shape[1]
        top = np.hstack([np.eye(r), self.R12])
        bottom = np.hstack([np.zeros((q, r)), self.R2])
        return np.vstack([top, bottom])


def extend_basis(Q_prev, W, drop_tol=DROP_TOL, reorthogonalize=True):
    """Orthonormal extension of ``span(Q_prev)`` by the columns of ``W``.

    Gram-Schmidt, column by column. Each column is projected against
    ``Q_prev`` and the new directions found so far, twice when
    ``reorthogonalize`` is set (one pass is not enough once the columns of
    ``W`` are nearly inside the span, which is the normal case late in the
    doubling). A column whose remainder is at most
    ``drop_tol`` times its original norm lies numerically inside the current
    span; it gets no new direction and no row in ``R2``.

    Parameters
    ----------
    Q_prev : (n, r) array
        Orthonormal columns.
    W : (n, k) array
        Columns to append.
    drop_tol : float
    reorthogonalize : bool
        Second projection pass. Turning it off is only meant for fault injection.

    Returns
    -------
    BasisExtension
    """
    Q_prev = np.asarray(Q_prev, dtype=float)
    W = np.array(W, dtype=float, copy=True)
    n, r = Q_prev.shape
    if W.shape[0] != n:
        raise ValueError(f"W has {W.shape[0]} rows, Q_prev has {n}")
    k = W.shape[1]
    passes = 2 if reorthogonalize else 1
    R12 = np.zeros((r, k))
    coeffs = np.zeros((k, k))
    Qn = np.zeros((n, k))
    q = 0
    for i in range(k):
        w = W[:, i]
        w0 = np.linalg.norm(w)
        for _ in range(passes):
            c = Q_prev.T @ w
            w = w - Q_prev @ c
            R12[:, i] += c
            if q:
                d = Qn[:, :q].T @ w
                w = w - Qn[:, :q] @ d
                coeffs[:q, i] += d
        nrm = np.linalg.norm(w)
        if w0 > 0 and nrm > drop_tol * w0:
            coeffs[q, i] = nrm
            Qn[:, q] = w / nrm
            q += 1
    Q_new = Qn[:, :q].copy()
    return BasisExtension(Q_new=Q_new, R12=R12, R2=coeffs[:q, :].copy())


@dataclass
class SvdFactors:
    """``M = U @ diag(S) @ Vt`` (thin) or with full square ``U``, ``V``."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    @property
    def V(self):
        return self.Vt.T

    def sigma_matrix(self):
        """Rectangular diagonal ``Sigma`` matching the shapes of ``U`` and ``Vt``."""
        Sig = np.zeros((self.U.shape[1], self.Vt.shape[0]))
        k = len(self.S)
        Sig[np.arange(k), np.arange(k)] = self.S
        return Sig


def svd(M, full=False):
    """Singular value decomposition with a deterministic sign convention.

    The largest-magnitude entry of each left singular vector is made
    positive (the matching right vector flips with it). Falls back to the
    QR-iteration LAPACK driver if divide-and-conquer does not converge.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ConvergenceFailure("svd input contains non-finite entries")
    a, b = M.shape
    if a == 0 or b == 0:
        U = np.eye(a) if full else np.zeros((a, 0))
        Vt = np.eye(b) if full else np.zeros((0, b))
        return SvdFactors(U=U, S=np.zeros(0), Vt=Vt)
    try:
        U, S, Vt = sla.svd(M, full_matrices=full, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        try:
            U, S, Vt = sla.svd(M, full_matrices=full, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise ConvergenceFailure(str(exc)) from exc
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    kk = min(U.shape[1], Vt.shape[0])
    Vt = Vt.copy()
    Vt[:kk] *= signs[:kk, None]
    return SvdFactors(U=U, S=S, Vt=Vt)


@dataclass
class TruncationSplit:
    r: int
    eps: float
    dropped_norm: float
    S: np.ndarray

    @property
    def kept(self):
        return self.S[: self.r]

    @property
    def dropped(self):
        return self.S[self.r:]


def truncation_split(S, eps):
    """Keep the singular values strictly above ``eps * S[0]``.

    At least one value is kept whenever ``S[0] > 0``. With ``eps = 0`` only
    exact zeros are dropped.
    """
    S = np.asarray(S, dtype=float)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if S.size == 0 or S[0] <= 0:
        return TruncationSplit(r=0, eps=eps, dropped_norm=float(S[0]) if S.size else 0.0, S=S)
    r = max(1, int(np.count_nonzero(S > eps * S[0])))
    dropped = float(S[r]) if r < S.size else 0.0
    return TruncationSplit(r=r, eps=eps, dropped_norm=dropped, S=S)
