"""CARE problem model and the shifted (Cayley) operator.

The continuous-time algebraic Riccati equation handled throughout is::

    A^T X + X A - X G X + H = 0,   G = B R^{-1} B^T,   H = C^T C.

Everything downstream touches ``A`` only through :class:`ShiftedOperator`,
which factors ``A_gamma = A - gamma I`` once and applies the Cayley map
``I + 2 gamma A_gamma^{-1}`` (or its transpose) to blocks.
"""
import threading
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (DimensionMismatch, InputError, RankDeficient,
                     SingularKGamma, SingularShift, WeightNotSPD)
from .kernels import qr_col_pivot

DEFAULT_GAMMA = 1e-6
DEFAULT_DENSE_THRESHOLD = 500


def _as_operator(A):
    if sp.issparse(A):
        return sp.csr_array(A, dtype=float)
    return np.asarray(A, dtype=float)


@dataclass
class CareProblem:
    """A CARE instance.

    ``A`` may be a dense array or any scipy sparse matrix. ``R`` defaults to
    the identity. ``gamma`` is the Cayley shift used by the doubling methods.
    """

    A: object
    B: np.ndarray
    C: np.ndarray
    R: np.ndarray = None
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        self.A = _as_operator(self.A)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.B.shape[0] != self.A.shape[0] and self.B.shape[1] == self.A.shape[0]:
            # a single input vector given as a row
            self.B = self.B.T
        if self.R is None:
            self.R = np.eye(self.B.shape[1])
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n = self.A.shape[0]
        if self.A.ndim != 2 or self.A.shape[1] != n:
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionMismatch(f"B has {self.B.shape[0]} rows, A is {n}x{n}")
        if self.C.shape[1] != n:
            raise DimensionMismatch(f"C has {self.C.shape[1]} columns, A is {n}x{n}")
        if self.R.shape != (self.m, self.m):
            raise DimensionMismatch(f"R must be {self.m}x{self.m}, got {self.R.shape}")
        if not self.gamma > 0:
            raise InputError(f"gamma must be positive, got {self.gamma}")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def l(self):
        return self.C.shape[0]

    @property
    def is_sparse(self):
        return sp.issparse(self.A)

    def dense_A(self):
        return self.A.toarray() if self.is_sparse else self.A

    @property
    def G(self):
        """Dense ``B R^{-1} B^T`` (desk scale only)."""
        return self.B @ np.linalg.solve(self.R, self.B.T)

    @property
    def H(self):
        """Dense ``C^T C`` (desk scale only)."""
        return self.C.T @ self.C

    def with_gamma(self, gamma):
        return replace(self, gamma=gamma)

    def dual(self):
        """Problem whose stabilizing solution is the dual solution ``Y``.

        Swaps ``A <-> A^T`` and ``B <-> C^T``; requires a folded weight.
        """
        if not np.array_equal(self.R, np.eye(self.m)):
            raise InputError("dual() expects R = I; call fold_weight first")
        return CareProblem(self.A.T, self.C.T, self.B.T, gamma=self.gamma)


@dataclass
class ValidationReport:
    rank_B: int
    rank_Ct: int
    r_symmetry_defect: float
    r_min_eig: float
    warnings: list = field(default_factory=list)


def validate_problem(p):
    """Check rank and weight assumptions; raise on the hard failures.

    Raises
    ------
    RankDeficient
        ``B`` or ``C^T`` is not of full column rank.
    WeightNotSPD
        ``R`` is not symmetric positive definite.
    """
    notes = []
    R = p.R
    sym = float(np.linalg.norm(R - R.T) / max(np.linalg.norm(R), np.finfo(float).tiny))
    min_eig = float(np.linalg.eigvalsh((R + R.T) / 2).min())
    if sym > 1e-12:
        raise WeightNotSPD(f"R is not symmetric (relative defect {sym:.2e})")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise WeightNotSPD(f"R is not positive definite (min eigenvalue {min_eig:.3e})") from None
    rank_B = qr_col_pivot(p.B).p
    rank_Ct = qr_col_pivot(p.C.T).p
    if rank_B != p.m:
        raise RankDeficient("B", rank_B, p.m)
    if rank_Ct != p.l:
        raise RankDeficient("C", rank_Ct, p.l)
    if p.m + p.l > p.n / 2:
        msg = f"m + l = {p.m + p.l} is not small compared with n = {p.n}"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    return ValidationReport(rank_B=rank_B, rank_Ct=rank_Ct, r_symmetry_defect=sym,
                            r_min_eig=min_eig, warnings=notes)


def fold_weight(p):
    """Return an equivalent problem with ``R = I``.

    ``B`` becomes ``B L^{-T}`` with ``R = L L^T`` so that ``B R^{-1} B^T`` is
    unchanged.
    """
    try:
        L = np.linalg.cholesky(p.R)
    except np.linalg.LinAlgError:
        raise WeightNotSPD("R is not positive definite") from None
    if np.array_equal(p.R, np.eye(p.m)):
        return replace(p, R=np.eye(p.m))
    Bf = sla.solve_triangular(L, p.B.T, lower=True).T
    return CareProblem(p.A, Bf, p.C, R=np.eye(p.m), gamma=p.gamma)


class ShiftedOperator:
    """Factorization of ``A_gamma = A - gamma I`` reused for every solve.

    Sparse ``A`` is factored by SuperLU with a COLAMD ordering; dense ``A``
    (or sparse below ``dense_threshold``) by LAPACK ``getrf``. Instances are
    read-only after construction apart from the solve counter, which is
    protected by a lock.
    """

    def __init__(self, A, gamma, dense_threshold=DEFAULT_DENSE_THRESHOLD):
        if not gamma > 0:
            raise InputError(f"gamma must be positive, got {gamma}")
        self.gamma = float(gamma)
        self.n = A.shape[0]
        self._lock = threading.Lock()
        self._solves = 0
        use_sparse = sp.issparse(A) and self.n > dense_threshold
        if use_sparse:
            Ag = sp.csc_array(A - self.gamma * sp.eye_array(self.n, format="csc"))
            try:
                self._lu = spla.splu(Ag, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularShift(
                    f"A - gamma I is singular for gamma={gamma:g}; try another shift") from exc
            diag = np.abs(self._lu.U.diagonal())
            self._solve = self._sparse_solve
        else:
            Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
            Ag = Ad - self.gamma * np.eye(self.n)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self._lu = sla.lu_factor(Ag, check_finite=True)
            diag = np.abs(np.diag(self._lu[0]))
            self._solve = self._dense_solve
        self.sparse = use_sparse
        scale = diag.max() if diag.size else 0.0
        if scale == 0.0 or diag.min() <= self.n * np.finfo(float).eps * scale:
            raise SingularShift(
                f"A - gamma I is numerically singular for gamma={gamma:g}; try another shift")

    def _sparse_solve(self, X, trans):
        return self._lu.solve(np.asfortranarray(X), trans="T" if trans else "N")

    def _dense_solve(self, X, trans):
        return sla.lu_solve(self._lu, X, trans=1 if trans else 0, check_finite=False)

    @property
    def solve_count(self):
        """Number of right-hand-side columns solved so far."""
        return self._solves

    def reset_count(self):
        with self._lock:
            self._solves = 0

    def solve(self, X, transpose=False):
        """``A_gamma^{-1} X`` (or ``A_gamma^{-T} X``) for a vector or block."""
        X = np.asarray(X, dtype=float)
        vec = X.ndim == 1
        X2 = X[:, None] if vec else X
        if X2.shape[0] != self.n:
            raise DimensionMismatch(f"block has {X2.shape[0]} rows, operator is {self.n}x{self.n}")
        if X2.shape[1] == 0:
            return X.copy()
        out = self._solve(X2, transpose)
        with self._lock:
            self._solves += X2.shape[1]
        return out[:, 0] if vec else out

    def dense_a_tilde(self):
        """Dense ``I + 2 gamma A_gamma^{-1}`` (desk scale; counts ``n`` solves)."""
        return np.eye(self.n) + 2 * self.gamma * self.solve(np.eye(self.n))


def build_shifted_operator(p, dense_threshold=DEFAULT_DENSE_THRESHOLD, gamma=None):
    """Factor ``A - gamma I`` for problem ``p``.

    Raises
    ------
    SingularShift
        The shifted matrix is singular; a different ``gamma`` is needed.
    """
    return ShiftedOperator(p.A, p.gamma if gamma is None else gamma, dense_threshold)


def apply_a_tilde(op, X, transpose=False):
    """``X + 2 gamma A_gamma^{-1} X``, one factored solve per column."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0 or X.shape[0] != op.n:
        raise DimensionMismatch(f"block has shape {X.shape}, operator is {op.n}x{op.n}")
    return X + 2 * op.gamma * op.solve(X, transpose=transpose)


def apply_a_tilde_power(op, X, e, transpose=False):
    """Apply the Cayley map ``e`` times, ``e`` a power of two.

    Costs exactly ``e`` solves per column; the power is never formed.
    """
    e = int(e)
    if e < 1 or e & (e - 1):
        raise ValueError(f"exponent must be a power of two, got {e}")
    X = np.asarray(X, dtype=float)
    for _ in range(e):
        X = apply_a_tilde(op, X, transpose=transpose)
    return X


@dataclass
class SdaSeed:
    U0: np.ndarray
    V0: np.ndarray
    Y0: np.ndarray
    T0: np.ndarray
    A0: np.ndarray = None
    G0: np.ndarray = None
    H0: np.ndarray = None


def sda_seed(p, op, dense_threshold=DEFAULT_DENSE_THRESHOLD):
    """Starting data of the doubling iteration.

    ``U0 = A_gamma^{-1} B``, ``V0 = A_gamma^{-T} C^T``, ``Y0 = B^T V0`` and
    ``T0 = U0^T V0`` are always formed. For ``n <= dense_threshold`` the dense
    coupled seed ``(A0, G0, H0)`` is added as well::

        K_gamma = A_gamma^T + H A_gamma^{-1} G
        A0 = I + 2 gamma K_gamma^{-T}
        G0 = 2 gamma A_gamma^{-1} G K_gamma^{-1}
        H0 = 2 gamma K_gamma^{-1} H A_gamma^{-1}

    The weight is folded first, so ``B`` here means ``B L^{-T}``.
    """
    pf = fold_weight(p)
    g = op.gamma
    U0 = op.solve(pf.B)
    V0 = op.solve(pf.C.T, transpose=True)
    Y0 = pf.B.T @ V0
    T0 = U0.T @ V0
    seed = SdaSeed(U0=U0, V0=V0, Y0=Y0, T0=T0)
    if p.n <= dense_threshold:
        n = p.n
        Ag = pf.dense_A() - g * np.eye(n)
        G, H = pf.G, pf.H
        K = Ag.T + H @ U0 @ pf.B.T
        lu, piv = sla.lu_factor(K)
        d = np.abs(np.diag(lu))
        if d.min() <= n * np.finfo(float).eps * d.max():
            raise SingularKGamma(
                f"K_gamma is numerically singular for gamma={g:g}; try another shift")
        Kinv = sla.lu_solve((lu, piv), np.eye(n))
        seed.A0 = np.eye(n) + 2 * g * Kinv.T
        G0 = 2 * g * (U0 @ pf.B.T) @ Kinv
        H0 = 2 * g * Kinv @ H @ np.linalg.solve(Ag, np.eye(n))
        seed.G0 = (G0 + G0.T) / 2
        seed.H0 = (H0 + H0.T) / 2
    return seed
