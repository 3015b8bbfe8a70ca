"""Desk-scale dense oracles.

Classic coupled SDA, the untruncated decoupled recursion, a Hamiltonian
Schur solver, and a dense shadow of the truncated solver that materializes
every intermediate the low-rank path avoids forming. None of this is meant
for large ``n``.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .care_core import (CareProblem, apply_a_tilde, build_shifted_operator,
                        fold_weight, sda_seed)
from .errors import (DimensionMismatch, ImaginaryAxisEigenvalues,
                     KernelCapExceeded, MaxIterations, NearSingularPencil,
                     SingularW1)

#: largest allowed kernel dimension 2^k * max(m, l)
KERNEL_CAP = 4096
#: cond(I + G_k H_k) above this aborts a classic SDA step
PENCIL_COND_MAX = 1e14


def _sym(M):
    return (M + M.T) / 2


# --------------------------------------------------------------------------
# classic SDA
# --------------------------------------------------------------------------

@dataclass
class SdaState:
    Ak: np.ndarray
    Gk: np.ndarray
    Hk: np.ndarray
    k: int = 0


def sda_step(s):
    """One doubling step on ``(A_k, G_k, H_k)``.

    ::

        A+ = A (I + G H)^{-1} A
        G+ = G + A (I + G H)^{-1} G A^T
        H+ = H + A^T H (I + G H)^{-1} A

    Raises
    ------
    NearSingularPencil
        ``cond(I + G_k H_k)`` exceeds ``PENCIL_COND_MAX``.
    """
    A, G, H = s.Ak, s.Gk, s.Hk
    n = A.shape[0]
    W = np.eye(n) + G @ H
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > PENCIL_COND_MAX:
        raise NearSingularPencil(f"cond(I + G H) = {cond:.2e} at k = {s.k}")
    lu = sla.lu_factor(W)
    WA = sla.lu_solve(lu, A)
    WG = sla.lu_solve(lu, G)
    # H (I + G H)^{-1} = (I + H G)^{-1} H = ((I + G H)^{-T} H)^T
    HW = sla.lu_solve(lu, H, trans=1).T
    return SdaState(Ak=A @ WA, Gk=_sym(G + A @ WG @ A.T), Hk=_sym(H + A.T @ HW @ A),
                    k=s.k + 1)


def _sda_iterate(s, tol, max_iter):
    hist = [s]
    for _ in range(max_iter):
        s = sda_step(s)
        hist.append(s)
        prev = hist[-2]
        dH = np.linalg.norm(s.Hk - prev.Hk)
        if dH <= tol * np.linalg.norm(s.Hk):
            return s.Hk, s.Gk, hist
    raise MaxIterations(f"classic SDA did not converge in {max_iter} steps")


def sda_solve_care(p, tol=1e-13, max_iter=60, op=None):
    """Dense CARE solve by classic SDA.

    Returns
    -------
    X, Y : ndarray
        Limits of ``H_k`` (the CARE solution) and ``G_k`` (the dual solution).
    history : list of SdaState
        Seed first.
    """
    op = build_shifted_operator(p) if op is None else op
    seed = sda_seed(p, op, dense_threshold=max(p.n, 1))
    return _sda_iterate(SdaState(seed.A0, seed.G0, seed.H0, 0), tol, max_iter)


def sda_solve_dare(A, G, H, tol=1e-13, max_iter=60):
    """Stabilizing solution of ``X = A^T X (I + G X)^{-1} A + H`` by SDA."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return _sda_iterate(SdaState(A, G, H, 0), tol, max_iter)


# --------------------------------------------------------------------------
# Hamiltonian oracle
# --------------------------------------------------------------------------

def hamiltonian_care_oracle(p, full_output=False):
    """CARE solution from the stable invariant subspace of the Hamiltonian.

    ``[[A, -G], [-H, -A^T]]`` is reduced to ordered real Schur form with the
    left half-plane first; with ``[W1; W2]`` spanning that subspace,
    ``X = W2 W1^{-1}``, returned symmetrized.

    Raises
    ------
    ImaginaryAxisEigenvalues
    SingularW1
    """
    n = p.n
    A = p.dense_A()
    Ham = np.block([[A, -p.G], [-p.H, -A.T]])
    T, Z, sdim = sla.schur(Ham, output="real", sort="lhp")
    ev = np.linalg.eigvals(T)
    gap = np.min(np.abs(ev.real)) if ev.size else np.inf
    if gap <= 1e3 * np.finfo(float).eps * max(np.linalg.norm(Ham, 1), 1.0) or sdim != n:
        raise ImaginaryAxisEigenvalues(
            f"Hamiltonian has eigenvalues on or near the imaginary axis (min |Re| = {gap:.2e})")
    W1, W2 = Z[:n, :n], Z[n:, :n]
    c1 = np.linalg.cond(W1)
    if not np.isfinite(c1) or c1 > 1 / np.finfo(float).eps:
        raise SingularW1(f"cond(W1) = {c1:.2e}")
    Xr = np.linalg.solve(W1.T, W2.T).T
    X = _sym(Xr)
    if not full_output:
        return X
    asym = np.linalg.norm(Xr - Xr.T) / max(np.linalg.norm(Xr), np.finfo(float).tiny)
    return X, {"asymmetry": float(asym), "min_eig": float(np.linalg.eigvalsh(X).min()),
               "cond_W1": float(c1), "imag_gap": float(gap)}


# --------------------------------------------------------------------------
# untruncated decoupled recursion
# --------------------------------------------------------------------------

@dataclass
class DsdaKernel:
    """Decoupled state ``Y_k``, ``T_k``, ``Ubreve_k``, ``Vbreve_k``.

    ``Ubreve_k = [U_0, ..., U_{2^k - 1}]`` with ``U_i = Atilde^i U_0`` (likewise
    ``V`` with the transpose); the last column block of each is needed to
    keep propagating.
    """

    Yk: np.ndarray
    Tk: np.ndarray
    Ubreve: np.ndarray
    Vbreve: np.ndarray
    k: int
    gamma: float
    m: int
    l: int


def dsda_kernel_init(p, op):
    seed = sda_seed(p, op, dense_threshold=-1)
    pf = fold_weight(p)
    return DsdaKernel(Yk=seed.Y0, Tk=seed.T0, Ubreve=seed.U0, Vbreve=seed.V0, k=0,
                      gamma=op.gamma, m=pf.m, l=pf.l)


def dsda_kernel_step(d, op, cap=KERNEL_CAP):
    """Double the decoupled state: ``k -> k + 1``.

    The new halves of ``Ubreve`` and ``Vbreve`` are ``Atilde^{2^k}`` times the
    old ones, generated block by block with one Cayley application each.

    Raises
    ------
    KernelCapExceeded
    """
    width = 2 ** (d.k + 1) * max(d.m, d.l)
    if width > cap:
        raise KernelCapExceeded(f"kernel would be {width} wide (cap {cap})")
    e = 2 ** d.k

    def grow(Xb, w, trans):
        blocks = [Xb]
        last = Xb[:, (e - 1) * w:]
        for _ in range(e):
            last = apply_a_tilde(op, last, transpose=trans)
            blocks.append(last)
        return np.hstack(blocks)

    U = grow(d.Ubreve, d.m, False)
    V = grow(d.Vbreve, d.l, True)
    Y = np.block([[np.zeros_like(d.Yk), d.Yk], [d.Yk, 2 * d.gamma * d.Tk]])
    return DsdaKernel(Yk=Y, Tk=U.T @ V, Ubreve=U, Vbreve=V, k=d.k + 1,
                      gamma=d.gamma, m=d.m, l=d.l)


def dsda_evaluate(d, op):
    """Dense ``(H_k, G_k, A_k)`` from the decoupled formulas."""
    c = 2 * d.gamma
    Y = d.Yk
    EH = np.linalg.solve(np.eye(Y.shape[1]) + Y.T @ Y, d.Vbreve.T)
    EG = np.linalg.solve(np.eye(Y.shape[0]) + Y @ Y.T, np.hstack([d.Ubreve.T, Y @ d.Vbreve.T]))
    n = d.Ubreve.shape[0]
    Hk = c * d.Vbreve @ EH
    Gk = c * d.Ubreve @ EG[:, :n]
    At = op.dense_a_tilde()
    Ak = np.linalg.matrix_power(At, 2 ** d.k) - c * d.Ubreve @ EG[:, n:]
    return _sym(Hk), _sym(Gk), Ak


# --------------------------------------------------------------------------
# random instances
# --------------------------------------------------------------------------

def random_stable_problem(n, m=1, l=1, seed=0, scale=1.0, gamma=None):
    """Well-conditioned stable CARE instance.

    ``A = scale * (-(W W^T / n + c I) + S)`` with ``S`` skew, so the symmetric
    part is negative definite and every eigenvalue has real part at most
    ``-scale * c``. The shift defaults to the geometric mean of the extreme
    real-part magnitudes, which is where the Cayley map contracts best.
    """
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, n))
    S = rng.standard_normal((n, n))
    S = (S - S.T) / (2 * np.sqrt(n))
    A = scale * (-(W @ W.T / n + 0.5 * np.eye(n)) + S)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((l, n))
    if gamma is None:
        re = -np.linalg.eigvals(A).real
        gamma = float(np.sqrt(re.min() * re.max()))
    return CareProblem(A, B, C, gamma=gamma)


def random_spectrum_problem(n, m=1, l=1, seed=0, gamma=None):
    """Instance with ``A = X diag(L1, L2) X^{-1} / 100``.

    ``L1`` holds ``n/2`` negative reals and ``L2`` the 2x2 real blocks of
    ``n/4`` stable complex pairs; all magnitudes are uniform on (0, 1), as is
    ``X``. These are the harder, ill-conditioned instances.
    """
    rng = np.random.default_rng(seed)
    n1 = n // 2
    npair = (n - n1) // 2
    n1 = n - 2 * npair
    D = np.zeros((n, n))
    D[:n1, :n1] = np.diag(-rng.uniform(0.01, 1, n1))
    for i in range(npair):
        a, b = -rng.uniform(0.01, 1), rng.uniform(0.01, 1)
        k = n1 + 2 * i
        D[k:k + 2, k:k + 2] = [[a, b], [-b, a]]
    Xs = rng.uniform(0, 1, (n, n))
    A = Xs @ D @ np.linalg.inv(Xs) / 100
    B = rng.uniform(0, 1, (n, m))
    C = rng.uniform(0, 1, (l, n))
    if gamma is None:
        re = -np.linalg.eigvals(A).real
        gamma = float(np.sqrt(re.min() * re.max()))
    return CareProblem(A, B, C, gamma=gamma)


def random_dare(n, seed=0, rho=0.9, m=None, l=None):
    """Random DARE data ``(A, G, H)`` with ``G, H`` positive semidefinite."""
    rng = np.random.default_rng(seed)
    m = n if m is None else m
    l = n if l is None else l
    A = rng.standard_normal((n, n))
    A *= rho / max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, m)) / np.sqrt(n)
    C = rng.standard_normal((l, n)) / np.sqrt(n)
    return A, B @ B.T, C.T @ C


# --------------------------------------------------------------------------
# dense shadow of the truncated solver
# --------------------------------------------------------------------------

@dataclass
class TraceStep:
    """Dense intermediates at step ``j``.

    ``Xu``/``Xv`` are the truncated basis blocks (``n x 2^j m``), ``Xu_pre``/
    ``Xv_pre`` their untruncated counterparts produced from step ``j - 1``.
    ``M`` and ``theta`` are coefficients in the orthonormal bases of the
    step (``M`` of ``Xu_pre``, ``theta`` of the kept basis).
    """

    j: int
    eps: float
    Y: np.ndarray
    Xu: np.ndarray
    Xv: np.ndarray
    Xu_pre: np.ndarray
    Xv_pre: np.ndarray
    M_G: np.ndarray
    M_H: np.ndarray
    theta_G: np.ndarray
    theta_H: np.ndarray
    sigma_G: np.ndarray
    sigma_H: np.ndarray
    phi_G: np.ndarray
    phi_H: np.ndarray
    A_pre: np.ndarray
    A_trunc: np.ndarray
    A_short: np.ndarray
    G_pre: np.ndarray
    H_pre: np.ndarray
    G: np.ndarray
    H: np.ndarray
    L_G_direct: np.ndarray
    L_H_direct: np.ndarray
    L_G: np.ndarray
    L_H: np.ndarray
    K: np.ndarray
    sigma_Y_next: float
    identity_defect_G: float
    identity_defect_H: float
    classic_defect: float = np.nan


@dataclass
class DenseTrace:
    gamma: float
    steps: list = field(default_factory=list)

    def __getitem__(self, j):
        for s in self.steps:
            if s.j == j:
                return s
        raise KeyError(j)

    @property
    def k_max(self):
        return self.steps[-1].j if self.steps else 0


def _E(Y):
    return np.linalg.inv(np.eye(Y.shape[0]) + Y @ Y.T)


def _EH(Y):
    return np.linalg.inv(np.eye(Y.shape[1]) + Y.T @ Y)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def dense_dsda_t_trace(p, eps_schedule, k_max, op=None):
    """Run the truncated solver and shadow it with dense algebra.

    The low-rank solver supplies its kept bases at each step; everything
    else (the doubled kernel ``Y_j``, the projected basis blocks, the
    iterates ``A_j``, ``G_j``, ``H_j`` before and after truncation, and the
    coupling matrices ``L_j``) is rebuilt densely from the decoupled formulas
    and compared with the shortcut forms the solver uses.

    Parameters
    ----------
    p : CareProblem
    eps_schedule : float or sequence
        Truncation tolerance per step, ``eps_schedule[j - 1]`` for step ``j``.
    k_max : int
        Last step traced.
    """
    from .dsda_t import compute_L, doubling_truncation_step, init_j1

    pf = fold_weight(p)
    op = build_shifted_operator(pf) if op is None else op
    g = op.gamma
    c = 2 * g
    eps = np.atleast_1d(np.asarray(eps_schedule, dtype=float))

    def eps_at(j):
        return float(eps[min(j - 1, len(eps) - 1)])

    At = op.dense_a_tilde()
    n = pf.n
    trace = DenseTrace(gamma=g)

    def record(j, sG, sH, cp, Xu_pre, Xv_pre, Y, basisG, basisH, A_pre, prev=None):
        EG, EH = _E(Y), _EH(Y)
        Tpow = np.linalg.matrix_power(At, 2 ** j)
        NG = sG.Q.T @ Xu_pre
        NH = sH.Q.T @ Xv_pre
        Xu, Xv = sG.Q @ NG, sH.Q @ NH
        G_pre = c * Xu_pre @ EG @ Xu_pre.T
        H_pre = c * Xv_pre @ EH @ Xv_pre.T
        Gt = c * (sG.Q * sG.sigma1 ** 2) @ sG.Q.T
        Ht = c * (sH.Q * sH.sigma1 ** 2) @ sH.Q.T
        idG = _rel(NG @ EG @ NG.T, np.diag(sG.sigma1 ** 2))
        idH = _rel(NH @ EH @ NH.T, np.diag(sH.sigma1 ** 2))
        A_trunc = Tpow - c * Xu @ EG @ Y @ Xv.T
        A_short = Tpow - c * (sG.Q * sG.sigma1) @ cp.K @ (sH.Q * sH.sigma1).T
        Om = cp.Omega
        LGd = c * NG @ EG @ Y @ NH.T @ Om.T
        LHd = c * NH @ EH @ Y.T @ NG.T @ Om
        LG, LH = compute_L(sG, sH, cp)
        st = TraceStep(
            j=j, eps=eps_at(j), Y=Y, Xu=Xu, Xv=Xv, Xu_pre=Xu_pre, Xv_pre=Xv_pre,
            M_G=basisG.T @ Xu_pre, M_H=basisH.T @ Xv_pre,
            theta_G=basisG.T @ sG.Q, theta_H=basisH.T @ sH.Q,
            sigma_G=sG.sigma1.copy(), sigma_H=sH.sigma1.copy(),
            phi_G=sG.phi1.copy(), phi_H=sH.phi1.copy(),
            A_pre=A_pre, A_trunc=A_trunc, A_short=A_short,
            G_pre=_sym(G_pre), H_pre=_sym(H_pre), G=Gt, H=Ht,
            L_G_direct=LGd, L_H_direct=LHd, L_G=LG, L_H=LH, K=cp.K.copy(),
            sigma_Y_next=float(cp.Sy[0]) if cp.Sy.size else 0.0,
            identity_defect_G=idG, identity_defect_H=idH)
        if prev is not None:
            cl = sda_step(SdaState(prev.A_trunc, prev.G, prev.H, prev.j))
            st.classic_defect = max(_rel(G_pre, cl.Gk), _rel(H_pre, cl.Hk), _rel(A_pre, cl.Ak))
        trace.steps.append(st)
        return st

    sG, sH, cp, _, _ = init_j1(pf, op, eps_at(1))
    U0 = op.solve(pf.B)
    V0 = op.solve(pf.C.T, transpose=True)
    Uc = np.hstack([U0, apply_a_tilde(op, U0)])
    Vc = np.hstack([V0, apply_a_tilde(op, V0, transpose=True)])
    Y0 = pf.B.T @ V0
    Y = np.block([[np.zeros_like(Y0), Y0], [Y0, c * U0.T @ V0]])
    A1 = np.linalg.matrix_power(At, 2) - c * Uc @ _E(Y) @ Y @ Vc.T
    bG = sla.orth(np.hstack([sG.Q, Uc]))
    bH = sla.orth(np.hstack([sH.Q, Vc]))
    prev = record(1, sG, sH, cp, Uc, Vc, Y, bG, bH, A1)

    for j in range(1, k_max):
        Tpow = np.linalg.matrix_power(At, 2 ** j)
        Xu_pre = np.hstack([prev.Xu, Tpow @ prev.Xu])
        Xv_pre = np.hstack([prev.Xv, Tpow.T @ prev.Xv])
        Tj = prev.Xu.T @ prev.Xv
        Y = np.block([[np.zeros_like(prev.Y), prev.Y], [prev.Y, c * Tj]])
        A_pre = np.linalg.matrix_power(At, 2 ** (j + 1)) - c * Xu_pre @ _E(Y) @ Y @ Xv_pre.T
        QG_old, QH_old = sG.Q, sH.Q
        sG, sH, cp, _, _ = doubling_truncation_step(sG, sH, cp, op, eps_at(j + 1))
        bG = sla.orth(np.hstack([QG_old, Tpow @ QG_old]))
        bH = sla.orth(np.hstack([QH_old, Tpow.T @ QH_old]))
        prev = record(j + 1, sG, sH, cp, Xu_pre, Xv_pre, Y, bG, bH, A_pre, prev)
    return trace
