"""Residuals, DARE perturbation theory and checks of the truncation error bounds."""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .care_core import CareProblem, fold_weight
from .errors import (ConditionsViolated, InsufficientData, SingularMatrix,
                     TraceMissing, UnstableClosedLoop)

_EPS = np.finfo(float).eps


def _sym(M):
    return (M + M.T) / 2


# --------------------------------------------------------------------------
# normalized residuals
# --------------------------------------------------------------------------

@dataclass
class ResidualReport:
    rho: float
    num: float
    den: float
    method: str


def _ratio(num, den):
    if den > 0:
        return num / den
    return 0.0 if num == 0 else np.inf


def _residual_factored(A, B, C, Z, D):
    """Normalized CARE residual of ``X = Z D Z^T``, never forming ``n x n``.

    ``R(X) = F S F^T`` with ``F = [Z, A^T Z, C^T]``; after a thin QR
    ``F = Q_F R_F`` every Frobenius norm reduces to one of a small matrix.
    """
    r, l = Z.shape[1], C.shape[0]
    W = A.T @ Z
    F = np.hstack([Z, W, C.T])
    if F.shape[1] == 0:
        return ResidualReport(0.0, 0.0, 0.0, "lowrank")
    Rf = sla.qr(F, mode="r", check_finite=False)[0]
    Rf = Rf[:min(Rf.shape), :]
    Rz, Rw, Rc = Rf[:, :r], Rf[:, r:2 * r], Rf[:, 2 * r:]
    ZB = Z.T @ B
    Mq = D @ ZB @ ZB.T @ D
    S = np.zeros((2 * r + l, 2 * r + l))
    S[:r, :r] = -Mq
    S[:r, r:2 * r] = D
    S[r:2 * r, :r] = D
    S[2 * r:, 2 * r:] = np.eye(l)
    num = np.linalg.norm(Rf @ S @ Rf.T)
    den = (2 * np.linalg.norm(Rw @ D @ Rz.T) + np.linalg.norm(Rz @ Mq @ Rz.T)
           + np.linalg.norm(Rc @ Rc.T))
    return ResidualReport(rho=_ratio(num, den), num=float(num), den=float(den), method="lowrank")


def _lowrank_parts(X):
    Q = np.asarray(X.Q, dtype=float)
    return Q, np.diag(X.scale * np.asarray(X.d, dtype=float) ** 2)


def residual_lowrank(p, X):
    """Normalized residual ``rho_X`` of a factored ``X = scale Q diag(d)^2 Q^T``.

    ::

        rho_X = ||A^T X + X A - X G X + H||_F
                / (2 ||A^T X||_F + ||X G X||_F + ||H||_F)

    Cost is ``O(n (2r + l)^2)`` plus one product with ``A^T``.
    """
    pf = fold_weight(p)
    Q, D = _lowrank_parts(X)
    return _residual_factored(pf.A, pf.B, pf.C, Q, D)


def residual_dual_lowrank(p, Y):
    """Normalized residual ``rho_Y`` of the dual equation ``A Y + Y A^T - Y H Y + G = 0``."""
    pf = fold_weight(p)
    Q, D = _lowrank_parts(Y)
    return _residual_factored(pf.A.T, pf.C.T, pf.B.T, Q, D)


def residual_dense(p, X):
    """Dense normalized residual (desk scale), for cross-checks."""
    A = p.dense_A()
    X = np.asarray(X, dtype=float)
    AX = A.T @ X
    XGX = X @ p.G @ X
    H = p.H
    num = np.linalg.norm(AX + AX.T - XGX + H)
    den = 2 * np.linalg.norm(AX) + np.linalg.norm(XGX) + np.linalg.norm(H)
    return ResidualReport(rho=_ratio(num, den), num=float(num), den=float(den), method="dense")


def residual_dual_dense(p, Y):
    pf = fold_weight(p)
    dual = CareProblem(pf.A.T, pf.C.T, pf.B.T, gamma=pf.gamma)
    return residual_dense(dual, Y)


# --------------------------------------------------------------------------
# DARE fixed point and perturbation theory
# --------------------------------------------------------------------------

def dare_fixed_point_defect(Ak, Gk, Hk, X):
    """``||A^T X (I + G X)^{-1} A + H - X||_F / ||X||_F`` (absolute when ``X = 0``).

    Raises
    ------
    SingularMatrix
        ``I + G X`` is numerically singular.
    """
    Ak, Gk, Hk, X = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Ak, Gk, Hk, X))
    n = X.shape[0]
    W = np.eye(n) + Gk @ X
    if np.linalg.cond(W) > 1 / _EPS:
        raise SingularMatrix("I + G X is numerically singular")
    D = Ak.T @ X @ np.linalg.solve(W, Ak) + Hk - X
    nx = np.linalg.norm(X)
    return float(np.linalg.norm(D) / nx) if nx > 0 else float(np.linalg.norm(D))


def _sym_basis(n):
    """Orthonormal basis (Frobenius) of symmetric ``n x n`` matrices, as columns of vec."""
    cols = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1 / np.sqrt(2)
            cols.append(E.ravel(order="F"))
    return np.array(cols).T


@dataclass
class PerturbationQuantities:
    ell: float
    xi: float
    eta: float
    Ac: np.ndarray
    P: np.ndarray = None
    #: unit perturbations attaining 1/ell, xi and eta to first order
    dH_dir: np.ndarray = None
    dA_dir: np.ndarray = None
    dG_dir: np.ndarray = None


def perturbation_quantities(A, G, H, X):
    """Operator-norm constants ``ell``, ``xi``, ``eta`` of a DARE solution.

    With ``A_c = (I + G X)^{-1} A``, ``P = X (I + G X)^{-1} A`` and the Stein
    operator ``L(Phi) = Phi - A_c^T Phi A_c`` on symmetric matrices::

        ell = min ||L(Phi)||            over symmetric ||Phi|| = 1
        xi  = max ||L^{-1}(P^T Phi + Phi^T P)||   over ||Phi|| = 1
        eta = max ||L^{-1}(P^T Phi P)||           over symmetric ||Phi|| = 1

    All three use the Frobenius norm on ``Phi`` and are computed exactly from
    vectorized operators of size ``n^2``.

    Raises
    ------
    UnstableClosedLoop
        ``A_c`` has spectral radius ``>= 1``.
    """
    A, G, X = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, G, X))
    n = A.shape[0]
    W = np.eye(n) + G @ X
    Ac = np.linalg.solve(W, A)
    rho = max(abs(np.linalg.eigvals(Ac)))
    if rho >= 1:
        raise UnstableClosedLoop(f"closed loop spectral radius {rho:.6f} >= 1")
    P = X @ Ac
    Lfull = np.eye(n * n) - np.kron(Ac.T, Ac.T)
    Sb = _sym_basis(n)
    Ul, sl, _ = np.linalg.svd(Lfull @ Sb, full_matrices=False)
    ell = sl[-1]
    dH_dir = Ul[:, -1].reshape((n, n), order="F")
    # xi: Phi ranges over all n x n matrices
    E = np.eye(n * n)
    rhs = []
    for k in range(n * n):
        Phi = E[:, k].reshape((n, n), order="F")
        rhs.append((P.T @ Phi + Phi.T @ P).ravel(order="F"))
    Mx = np.linalg.solve(Lfull, np.array(rhs).T)
    _, sx, Vx = np.linalg.svd(Mx)
    xi = sx[0]
    dA_dir = Vx[0].reshape((n, n), order="F")
    rhs = [(P.T @ Sb[:, k].reshape((n, n), order="F") @ P).ravel(order="F")
           for k in range(Sb.shape[1])]
    Me = np.linalg.solve(Lfull, np.array(rhs).T)
    _, se, Ve = np.linalg.svd(Me)
    eta = se[0]
    dG_dir = (Sb @ Ve[0]).reshape((n, n), order="F")
    return PerturbationQuantities(ell=float(ell), xi=float(xi), eta=float(eta), Ac=Ac, P=P,
                                  dH_dir=_sym(dH_dir), dA_dir=dA_dir, dG_dir=_sym(dG_dir))


@dataclass
class PerturbationBound:
    delta: float
    alpha: float
    g: float
    omega: float
    zeta: float
    theta: float
    conditions_met: dict = field(default_factory=dict)


def _n2(M):
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def _nF(M):
    return float(np.linalg.norm(np.atleast_2d(M)))


def perturbation_bound(q, base, deltas, raise_on_violation=True):
    """Nonlinear forward error bound for a perturbed DARE.

    Coefficient matrices (``A``, ``G``, ``(I + G X)^{-1}`` and products with
    ``X``) enter through spectral norms; the perturbations and the error
    through Frobenius norms, matching the Frobenius-induced ``ell``, ``xi``,
    ``eta``. The returned ``theta`` bounds ``||X~ - X||_F``.

    Parameters
    ----------
    q : PerturbationQuantities
    base : tuple
        ``(A, G, H, X)``.
    deltas : tuple
        ``(dA, dG, dH)``.
    raise_on_violation : bool
        Raise :class:`ConditionsViolated` if any hypothesis fails; otherwise
        return the bound with ``theta = nan``.
    """
    A, G, H, X = (np.atleast_2d(np.asarray(M, dtype=float)) for M in base)
    dA, dG, dH = (np.atleast_2d(np.asarray(M, dtype=float)) for M in deltas)
    n = A.shape[0]
    Winv = np.linalg.inv(np.eye(n) + G @ X)
    nW = _n2(Winv)
    nWA = _n2(Winv @ A)
    nXW = _n2(X @ Winv)
    nXWA = _n2(X @ Winv @ A)
    a, gg, h = _nF(dA), _nF(dG), _nF(dH)
    ell, xi, eta = q.ell, q.xi, q.eta
    flags = {}
    shrink = 1 - nXW * gg
    flags["xwg_lt_1"] = shrink > 0
    shrink = shrink if shrink > 0 else np.nan
    delta = (a + nXWA * gg) / shrink
    alpha = nW * (_n2(A) + a) / shrink
    g = nW * (_n2(G) + gg) / shrink
    omega = h / ell + xi * a + eta * gg + delta * nXW / ell * (a + nXWA * gg)
    zeta = delta * nW * (2 * nWA + delta * nW)
    b = ell - zeta + ell * g * omega
    disc = b * b - 4 * ell * g * omega * (ell - zeta + alpha ** 2)
    flags["discriminant"] = bool(disc >= 0)
    if omega == 0:
        theta = 0.0
    else:
        theta = 2 * ell * omega / (b + np.sqrt(disc)) if disc >= 0 else np.nan
    tol_psd = 1e-14
    Gt, Ht = G + dG, H + dH
    flags["G_psd"] = bool(np.linalg.eigvalsh((Gt + Gt.T) / 2).min()
                          >= -tol_psd * max(_n2(Gt), 1.0))
    flags["H_psd"] = bool(np.linalg.eigvalsh((Ht + Ht.T) / 2).min()
                          >= -tol_psd * max(_n2(Ht), 1.0))
    flags["g_theta_lt_1"] = bool(g * theta < 1)
    lhs = (delta * nW + g * theta * nWA) / (1 - g * theta)
    flags["stability_margin"] = bool(lhs < ell / (nWA + np.sqrt(ell + nWA ** 2)))
    if g == 0 or omega == 0:
        flags["omega_small"] = bool(ell - zeta > 0)
    else:
        lz = ell - zeta
        rhs = lz ** 2 / (ell * g * (lz + 2 * alpha + np.sqrt((lz + 2 * alpha) ** 2 - lz ** 2)))
        flags["omega_small"] = bool(lz > 0 and omega < rhs)
    flags = {k: bool(v) for k, v in flags.items()}
    ok = all(flags.values())
    if not ok and raise_on_violation:
        raise ConditionsViolated(flags)
    return PerturbationBound(delta=float(delta), alpha=float(alpha), g=float(g),
                             omega=float(omega), zeta=float(zeta),
                             theta=float(theta) if ok else np.nan, conditions_met=flags)


def first_order_bound(q, dA_norm, dG_norm, dH_norm):
    """``||dH|| / ell + xi ||dA|| + eta ||dG||``."""
    return dH_norm / q.ell + q.xi * dA_norm + q.eta * dG_norm


# --------------------------------------------------------------------------
# truncation error bounds on a dense trace
# --------------------------------------------------------------------------

@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    ok: bool
    status: str = "ok"

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.ok))


def _premise(eps, kept):
    """Whether every kept singular value lies above the ``eps`` cut."""
    return bool(kept.size and np.all(kept > eps * kept[0]))


def _slack(*mats):
    return 64 * _EPS * max(max((_n2(M) for M in mats), default=0.0), 1.0)


def truncation_bound_check_j1(trace, eps1=None):
    """Bound on ``||A_1^{(1)} - A_1||_2`` caused by the first truncation.

    ``rhs = 4 gamma eps1 ||Sigma_G|| ||Sigma_Y|| ||Sigma_H||``, where the
    ``Sigma_G``/``Sigma_H`` are the kept singular values and ``Sigma_Y`` those
    of the doubled kernel ``Y_1``. A roundoff allowance of ``64 eps_mach``
    times the size of the operands is added.
    """
    try:
        st = trace[1]
    except (KeyError, IndexError, TypeError):
        raise TraceMissing("trace has no step 1") from None
    eps1 = st.eps if eps1 is None else eps1
    if not (_premise(eps1, st.sigma_G) and _premise(eps1, st.sigma_H)):
        return BoundCheck(np.nan, np.nan, False, "not_applicable")
    lhs = _n2(st.A_trunc - st.A_pre)
    sY = np.linalg.norm(st.Y, 2) if st.Y.size else 0.0
    rhs = 4 * trace.gamma * eps1 * st.sigma_G[0] * sY * st.sigma_H[0]
    ok = lhs <= rhs * (1 + 1e-8) + _slack(st.A_pre)
    return BoundCheck(lhs, rhs, bool(ok))


def truncation_bound_check_js(trace, s, eps=None):
    """Bound on ``||A_{s+1}^{(s+1)} - A_{s+1}^{(s)}||_2`` for ``s >= 1``.

    ::

        rhs = 4 gamma kappa_s eps ||Sigma_G|| ||Sigma_H||
        kappa_s = max(1, ||K_s||^2) (2 gamma ||Sigma_Y|| + sqrt(1 + 4 gamma^2 ||Sigma_Y||^2))

    with ``Sigma_Y`` the singular values of ``diag(sG) Omega_s diag(sH)`` at
    step ``s`` and ``Sigma_G``/``Sigma_H`` the kept values at step ``s + 1``.
    The truncated iterate is evaluated both from the dense decoupled formula
    and from the kernel shortcut; the larger deviation is used.
    """
    try:
        prev, st = trace[s], trace[s + 1]
    except (KeyError, IndexError, TypeError):
        raise TraceMissing(f"trace does not reach step {s + 1}") from None
    eps = st.eps if eps is None else eps
    if not (_premise(eps, st.sigma_G) and _premise(eps, st.sigma_H)):
        return BoundCheck(np.nan, np.nan, False, "not_applicable")
    g = trace.gamma
    lhs = max(_n2(st.A_trunc - st.A_pre), _n2(st.A_short - st.A_pre))
    sY = prev.sigma_Y_next
    kappa = max(1.0, _n2(prev.K) ** 2) * (2 * g * sY + np.sqrt(1 + 4 * g * g * sY * sY))
    rhs = 4 * g * kappa * eps * st.sigma_G[0] * st.sigma_H[0]
    ok = lhs <= rhs * (1 + 1e-8) + _slack(st.A_pre)
    return BoundCheck(lhs, rhs, bool(ok))


# --------------------------------------------------------------------------
# monotonicity and convergence order
# --------------------------------------------------------------------------

@dataclass
class MonotonicityReport:
    ok: bool
    min_eigs: list
    worst_step: int


def _as_dense(M):
    if hasattr(M, "Q") and hasattr(M, "d"):
        Z = M.Q * (np.sqrt(M.scale) * M.d)
        return Z, None
    return None, np.atleast_2d(np.asarray(M, dtype=float))


def _diff_min_eig(new, old):
    Zn, Dn = _as_dense(new)
    Zo, Do = _as_dense(old)
    if Dn is not None and Do is not None:
        D = Dn - Do
        return float(np.linalg.eigvalsh((D + D.T) / 2).min()), np.linalg.norm(Dn, 2)
    # joint basis for the low-rank difference
    if Zn is None:
        w, V = np.linalg.eigh((Dn + Dn.T) / 2)
        Zn = V * np.sqrt(np.clip(w, 0, None))
    if Zo is None:
        w, V = np.linalg.eigh((Do + Do.T) / 2)
        Zo = V * np.sqrt(np.clip(w, 0, None))
    F = np.hstack([Zn, Zo])
    if F.shape[1] == 0:
        return 0.0, 0.0
    R = np.linalg.qr(F, mode="r")
    k = Zn.shape[1]
    S = R[:, :k] @ R[:, :k].T - R[:, k:] @ R[:, k:].T
    ev = np.linalg.eigvalsh((S + S.T) / 2)
    # the joint span is at most n-dimensional; directions outside it contribute 0
    lo = min(float(ev.min()), 0.0) if F.shape[0] > F.shape[1] else float(ev.min())
    return lo, float(np.linalg.norm(Zn, 2) ** 2)


def monotonicity_check(iterates, tol=1e-12):
    """Check ``H_{k+1} - H_k >= -tol ||H_{k+1}||`` in the psd order.

    Accepts dense matrices or low-rank Grams (anything with ``Q``, ``d``,
    ``scale``).
    """
    iterates = list(iterates)
    if len(iterates) < 2:
        raise InsufficientData("monotonicity needs at least two iterates")
    mins, ok, worst, worst_val = [], True, 0, np.inf
    for k in range(len(iterates) - 1):
        lo, scale = _diff_min_eig(iterates[k + 1], iterates[k])
        rel = lo / scale if scale > 0 else lo
        mins.append(rel)
        if rel < -tol:
            ok = False
        if rel < worst_val:
            worst, worst_val = k, rel
    return MonotonicityReport(ok=ok, min_eigs=mins, worst_step=worst)


def convergence_order(errors, floor=1e-14, band=10.0, min_points=4):
    """Least-squares slope of ``log e_{k+1}`` against ``log e_k``.

    Only the leading run of values above ``band * floor`` is used; a value
    within ``band`` of the floor is roundoff, not decay.

    Raises
    ------
    InsufficientData
        Fewer than ``min_points`` usable values.
    """
    e = np.asarray(errors, dtype=float)
    use = []
    for v in e:
        if not (np.isfinite(v) and v > band * floor):
            break
        use.append(v)
    need = max(min_points, 3)
    if len(use) < need:
        raise InsufficientData(f"{len(use)} points above {band * floor:g}, need {need}")
    le = np.log(use)
    slope = np.polyfit(le[:-1], le[1:], 1)[0]
    return float(slope)
