"""Large-scale doubling with per-step truncation.

The solver carries only orthonormal bases ``Q`` (``n x r``), their kept
singular values and a small coupling kernel ``K``. With ``c = 2 gamma``,
``P = Q_U diag(sG)`` and ``Q = Q_V diag(sH)``, the state at step ``j`` is::

    G_j = c P P^T,   H_j = c Q Q^T,   A_j = Atilde^{2^j} - c P K Q^T.

One classic doubling step is applied to this triple in factored form and the
result is truncated again, so nothing of size ``2^j m`` is ever built.
"""
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .care_core import (DEFAULT_DENSE_THRESHOLD, apply_a_tilde,
                        apply_a_tilde_power, build_shifted_operator,
                        fold_weight)
from .diagnostics import residual_dual_lowrank, residual_lowrank
from .errors import (DegenerateProblem, DimensionMismatch, KernelDegenerate,
                     NearSingularPencil)
from .kernels import extend_basis, qr_col_pivot, svd, truncation_split

#: rho_X above this multiple of its running minimum counts as a divergent step
DIVERGENCE_FACTOR = 100.0
#: consecutive divergent steps before giving up
DIVERGENCE_PATIENCE = 3


@dataclass
class SideState:
    """Kept basis, singular values and right factor of one side."""

    Q: np.ndarray
    sigma1: np.ndarray
    phi1: np.ndarray

    @property
    def r(self):
        return len(self.sigma1)


@dataclass
class CouplingState:
    """Coupling between the two sides at step ``j``.

    ``K`` defines ``A_j`` as in the module docstring. ``Omega = Q_U^T Q_V`` and
    ``Uy, Sy, Vy`` is the full SVD of ``diag(sG) Omega diag(sH)``, which drives
    the next step.
    """

    K: np.ndarray
    Uy: np.ndarray
    Sy: np.ndarray
    Vy: np.ndarray
    Omega: np.ndarray
    j: int
    gamma: float

    def sigma_matrix(self):
        S = np.zeros((self.Uy.shape[1], self.Vy.shape[1]))
        k = len(self.Sy)
        S[np.arange(k), np.arange(k)] = self.Sy
        return S


@dataclass
class LowRankGram:
    """``scale * Q diag(d)^2 Q^T`` with orthonormal ``Q``."""

    Q: np.ndarray
    d: np.ndarray
    scale: float

    @property
    def rank(self):
        return len(self.d)

    @property
    def Z(self):
        """Factor ``Z`` with ``Z Z^T`` equal to the represented matrix."""
        return self.Q * (np.sqrt(self.scale) * self.d)

    def dense(self):
        Z = self.Z
        return Z @ Z.T


@dataclass
class SolverConfig:
    """Solver settings.

    ``gamma=None`` uses the shift stored on the problem. ``trunc_tol`` is a
    scalar or a per-step sequence (step ``j`` reads entry ``j - 1``, the last
    entry repeats); ``trunc_tol_g`` overrides it on the G (dual) side.
    """

    gamma: float = None
    trunc_tol: object = 1e-15
    trunc_tol_g: object = None
    res_tol: float = 1e-13
    max_iter: int = 20
    dense_threshold: int = DEFAULT_DENSE_THRESHOLD
    compute_dual: bool = True
    record_history: bool = False

    @staticmethod
    def _at(tol, j):
        t = np.atleast_1d(np.asarray(tol, dtype=float))
        return float(t[min(j - 1, len(t) - 1)])

    def eps_h(self, j):
        return self._at(self.trunc_tol, j)

    def eps_g(self, j):
        return self._at(self.trunc_tol if self.trunc_tol_g is None else self.trunc_tol_g, j)

    @classmethod
    def from_env(cls, **kw):
        """Config with ``SDACARE_DENSE_THRESHOLD`` applied when set."""
        env = os.environ.get("SDACARE_DENSE_THRESHOLD")
        if env is not None and "dense_threshold" not in kw:
            kw["dense_threshold"] = int(env)
        return cls(**kw)


@dataclass
class IterationRecord:
    j: int
    rho_x: float
    rho_y: float
    rank_x: int
    rank_y: int
    increment: float
    seconds: float
    solves: int


@dataclass
class RunRecord:
    iterations: list = field(default_factory=list)
    termination: str = ""
    message: str = ""
    gamma: float = None
    qr_rank_scale: float = kernels.QR_RANK_SCALE
    drop_tol: float = kernels.DROP_TOL
    history: list = field(default_factory=list)

    @property
    def n_iter(self):
        return self.iterations[-1].j if self.iterations else 0

    @property
    def rho_x(self):
        return np.array([it.rho_x for it in self.iterations])

    @property
    def rho_y(self):
        return np.array([it.rho_y for it in self.iterations])


def _coupling(sG, sH, K, j, gamma):
    Om = sG.Q.T @ sH.Q
    f = svd(sG.sigma1[:, None] * Om * sH.sigma1[None, :], full=True)
    return CouplingState(K=K, Uy=f.U, Sy=f.S, Vy=f.V, Omega=Om, j=j, gamma=gamma)


def _inv_sqrt_upsilon(S, size, scale):
    """Diagonal of ``(I + scale * Sigma Sigma^T)^{-1/2}`` of the given size."""
    u = np.ones(size)
    u[:len(S)] = 1.0 / np.sqrt(1.0 + scale * S ** 2)
    return u


def _truncate(basis, F, eps):
    f = svd(F)
    t = truncation_split(f.S, eps)
    if t.r == 0:
        raise KernelDegenerate("truncated factor has no positive singular value")
    return SideState(Q=basis @ f.U[:, :t.r], sigma1=f.S[:t.r].copy(),
                     phi1=f.V[:, :t.r].copy())


def _gram(side, gamma):
    return LowRankGram(Q=side.Q, d=side.sigma1, scale=2 * gamma)


def compute_K1(phi1G, Sy1, phi1H):
    """``K_1 = phi1G^T Sy1 phi1H`` with ``Sy1`` the rectangular singular-value matrix of ``Y_1``."""
    Sy1 = np.atleast_2d(Sy1)
    if phi1G.shape[0] != Sy1.shape[0] or phi1H.shape[0] != Sy1.shape[1]:
        raise DimensionMismatch(
            f"factor shapes {phi1G.shape}, {Sy1.shape}, {phi1H.shape} do not chain")
    return phi1G.T @ Sy1 @ phi1H


def init_j1(p, op, eps1, eps1_g=None):
    """First truncated step from the seed blocks ``U0``, ``V0``.

    ``[U0, U1]`` and ``[V0, V1]`` are factored by pivoted QR, the 2x2 block
    kernel ``Y_1`` by SVD, and the weighted coefficient matrices
    ``R_U U_Y (I + Y Y^T)^{-1/2}`` (and the V analogue) by SVD again; their
    truncated left factors give the bases of ``G_1`` and ``H_1``.

    Returns
    -------
    sideG, sideH : SideState
    coupling : CouplingState
    Gt, Ht : LowRankGram

    Raises
    ------
    DegenerateProblem
        ``B = 0`` or ``C = 0``.
    """
    pf = fold_weight(p)
    g = op.gamma
    eps1_g = eps1 if eps1_g is None else eps1_g
    U0 = op.solve(pf.B)
    V0 = op.solve(pf.C.T, transpose=True)
    Ucat = np.hstack([U0, apply_a_tilde(op, U0)])
    Vcat = np.hstack([V0, apply_a_tilde(op, V0, transpose=True)])
    qU, qV = qr_col_pivot(Ucat), qr_col_pivot(Vcat)
    if qU.p == 0:
        raise DegenerateProblem("B is zero: the G side has no range")
    if qV.p == 0:
        raise DegenerateProblem("C is zero: the H side has no range")
    Y0 = pf.B.T @ V0
    Y1 = np.block([[np.zeros_like(Y0), Y0], [Y0, 2 * g * (U0.T @ V0)]])
    fy = svd(Y1, full=True)
    m2, l2 = Y1.shape
    uG = _inv_sqrt_upsilon(fy.S, m2, 1.0)
    uH = _inv_sqrt_upsilon(fy.S, l2, 1.0)
    sG = _truncate(qU.Q, (qU.R_unpermuted @ fy.U) * uG, eps1_g)
    sH = _truncate(qV.Q, (qV.R_unpermuted @ fy.V) * uH, eps1)
    K1 = compute_K1(sG.phi1, fy.sigma_matrix(), sH.phi1)
    cp = _coupling(sG, sH, K1, 1, g)
    return sG, sH, cp, _gram(sG, g), _gram(sH, g)


def compute_L(sideG, sideH, coupling):
    """Coupling matrices ``L_G`` (``rG x rG``) and ``L_H`` (``rH x rH``).

    ::

        L_G = c diag(sG) K diag(sH) Omega^T
        L_H = c diag(sH) K^T diag(sG) Omega
    """
    K = coupling.K
    if K.shape != (sideG.r, sideH.r) or coupling.Omega.shape != K.shape:
        raise DimensionMismatch(
            f"K is {K.shape}, sides have ranks {sideG.r} and {sideH.r}")
    c = 2 * coupling.gamma
    SKS = sideG.sigma1[:, None] * K * sideH.sigma1[None, :]
    return c * SKS @ coupling.Omega.T, c * SKS.T @ coupling.Omega


def advance_K(coupling_prev, phi1G_next, phi1H_next):
    """Kernel of the next step from the previous kernel and the new right factors.

    With ``W = U Sigma V^T`` the SVD held by ``coupling_prev``::

        Z = diag(K, I) [[c V Sigma^T U^T,      V Ups_H^{1/2}],
                        [Ups_G^{1/2} U^T,      c Sigma      ]] diag(K, I)
        K_next = phi1G_next^T Z phi1H_next

    where ``Ups_G = I + c^2 Sigma Sigma^T`` and ``Ups_H = I + c^2 Sigma^T Sigma``
    are diagonal.
    """
    cp = coupling_prev
    c = 2 * cp.gamma
    K, U, V = cp.K, cp.Uy, cp.Vy
    rG, rH = K.shape
    if phi1G_next.shape[0] != 2 * rG or phi1H_next.shape[0] != 2 * rH:
        raise DimensionMismatch(
            f"right factors {phi1G_next.shape}, {phi1H_next.shape} do not match K {K.shape}")
    S = cp.sigma_matrix()
    sqG = 1.0 / _inv_sqrt_upsilon(cp.Sy, rG, c * c)
    sqH = 1.0 / _inv_sqrt_upsilon(cp.Sy, rH, c * c)
    KV = K @ V
    UtK = U.T @ K
    Z = np.block([[c * KV @ S.T @ UtK, KV * sqH[None, :]],
                  [sqG[:, None] * UtK, c * S]])
    return phi1G_next.T @ Z @ phi1H_next


def doubling_truncation_step(sideG, sideH, coupling, op, eps_next, eps_next_g=None,
                             reorthogonalize=True):
    """Advance the truncated state from step ``j`` to ``j + 1``.

    Each side costs ``2^j r`` factored solves (the Cayley power applied to
    its basis). The doubled iterate is represented through a ``2r``-column
    coefficient matrix in the extended basis, SVD-truncated, and the kernel
    is carried over with :func:`advance_K`.

    ``reorthogonalize=False`` drops the second Gram-Schmidt pass; it exists
    only to let the check suite inject a fault.

    Returns
    -------
    sideG, sideH, coupling, Gt, Ht
    """
    cp = coupling
    g = cp.gamma
    c = 2 * g
    eps_next_g = eps_next if eps_next_g is None else eps_next_g
    e = 2 ** cp.j
    extG = extend_basis(sideG.Q, apply_a_tilde_power(op, sideG.Q, e),
                        reorthogonalize=reorthogonalize)
    extH = extend_basis(sideH.Q, apply_a_tilde_power(op, sideH.Q, e, transpose=True),
                        reorthogonalize=reorthogonalize)
    rG, rH = sideG.r, sideH.r
    S = cp.sigma_matrix()
    iuG = _inv_sqrt_upsilon(cp.Sy, rG, c * c)
    iuH = _inv_sqrt_upsilon(cp.Sy, rH, c * c)
    sg, sh = sideG.sigma1, sideH.sigma1
    BG = np.block([[np.diag(sg), -c * (sg[:, None] * (cp.K @ cp.Vy @ S.T)) * iuG[None, :]],
                   [np.zeros((rG, rG)), (sg[:, None] * cp.Uy) * iuG[None, :]]])
    BH = np.block([[np.diag(sh), -c * (sh[:, None] * (cp.K.T @ cp.Uy @ S)) * iuH[None, :]],
                   [np.zeros((rH, rH)), (sh[:, None] * cp.Vy) * iuH[None, :]]])
    if not (np.all(np.isfinite(BG)) and np.all(np.isfinite(BH))):
        raise NearSingularPencil(f"non-finite kernel at step {cp.j}")
    nG = np.hstack([sideG.Q, extG.Q_new])
    nH = np.hstack([sideH.Q, extH.Q_new])
    sG = _truncate(nG, extG.R_hat @ BG, eps_next_g)
    sH = _truncate(nH, extH.R_hat @ BH, eps_next)
    K = advance_K(cp, sG.phi1, sH.phi1)
    if not np.all(np.isfinite(K)):
        raise NearSingularPencil(f"non-finite coupling kernel at step {cp.j + 1}")
    cp_next = _coupling(sG, sH, K, cp.j + 1, g)
    return sG, sH, cp_next, _gram(sG, g), _gram(sH, g)


def _increment(new, old):
    """``||new - old||_F / ||new||_F`` for two low-rank Grams, in a joint basis."""
    F = np.hstack([new.Z, old.Z])
    R = np.linalg.qr(F, mode="r")
    k = new.rank
    D = R[:, :k] @ R[:, :k].T - R[:, k:] @ R[:, k:].T
    nn = np.linalg.norm(new.d ** 2) * new.scale
    return float(np.linalg.norm(D) / nn) if nn > 0 else 0.0


def solve(p, cfg=None, callback=None, reorthogonalize=True):
    """Low-rank stabilizing solution of the CARE (and of its dual).

    Iterates until ``rho_X <= cfg.res_tol`` or ``j = cfg.max_iter``. The
    run record's ``termination`` is one of ``Converged``, ``MaxIterations``,
    ``Diverged`` or ``NearSingularPencil``; in the last two cases the
    returned factors are the last completed iterate.

    Parameters
    ----------
    p : CareProblem
    cfg : SolverConfig, optional
    callback : callable, optional
        Called as ``callback(j, sideG, sideH, coupling)`` after every step.
    reorthogonalize : bool
        Passed to :func:`doubling_truncation_step`.

    Returns
    -------
    X, Y : LowRankGram
        ``Y`` is None when ``cfg.compute_dual`` is off.
    record : RunRecord
    """
    cfg = SolverConfig() if cfg is None else cfg
    pf = fold_weight(p)
    gamma = pf.gamma if cfg.gamma is None else cfg.gamma
    op = build_shifted_operator(pf, cfg.dense_threshold, gamma=gamma)
    rec = RunRecord(gamma=gamma)

    def log(j, Gt, Ht, prev, t0, s0):
        rx = residual_lowrank(pf, Ht).rho
        ry = residual_dual_lowrank(pf, Gt).rho if cfg.compute_dual else np.nan
        inc = _increment(Ht, prev) if prev is not None else np.nan
        rec.iterations.append(IterationRecord(
            j=j, rho_x=rx, rho_y=ry, rank_x=Ht.rank, rank_y=Gt.rank, increment=inc,
            seconds=time.perf_counter() - t0, solves=op.solve_count - s0))
        if cfg.record_history:
            rec.history.append((Gt, Ht))
        return rx

    t0, s0 = time.perf_counter(), op.solve_count
    sG, sH, cp, Gt, Ht = init_j1(pf, op, cfg.eps_h(1), cfg.eps_g(1))
    rx = log(1, Gt, Ht, None, t0, s0)
    if callback is not None:
        callback(1, sG, sH, cp)
    best, strikes = rx, 0
    while True:
        j = cp.j
        if rx <= cfg.res_tol:
            rec.termination = "Converged"
            break
        if j >= cfg.max_iter:
            rec.termination = "MaxIterations"
            rec.message = f"rho_X = {rx:.3e} after {j} iterations"
            break
        t0, s0 = time.perf_counter(), op.solve_count
        try:
            step = doubling_truncation_step(sG, sH, cp, op, cfg.eps_h(j + 1), cfg.eps_g(j + 1),
                                            reorthogonalize=reorthogonalize)
        except (NearSingularPencil, KernelDegenerate) as exc:
            rec.termination = "NearSingularPencil"
            rec.message = str(exc)
            break
        sG, sH, cp, Gt_new, Ht_new = step
        rx = log(j + 1, Gt_new, Ht_new, Ht, t0, s0)
        Gt, Ht = Gt_new, Ht_new
        if callback is not None:
            callback(j + 1, sG, sH, cp)
        best = min(best, rx)
        strikes = strikes + 1 if rx > DIVERGENCE_FACTOR * best else 0
        if strikes >= DIVERGENCE_PATIENCE:
            rec.termination = "Diverged"
            rec.message = f"rho_X = {rx:.3e} against a best of {best:.3e}"
            break
    return Ht, (Gt if cfg.compute_dual else None), rec
