import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from sdacare.care_core import CareProblem, build_shifted_operator, fold_weight
from sdacare.dsda_t import (CouplingState, SideState, SolverConfig, advance_K,
                            compute_K1, compute_L, doubling_truncation_step,
                            init_j1, solve)
from sdacare.errors import DegenerateProblem, DimensionMismatch
from sdacare.reference import (dsda_evaluate, dsda_kernel_init, dsda_kernel_step,
                               hamiltonian_care_oracle, random_stable_problem)

SQRT2M1 = np.sqrt(2.0) - 1.0


def run_steps(p, k, eps=0.0):
    op = build_shifted_operator(p)
    sG, sH, cp, Gt, Ht = init_j1(p, op, eps)
    for j in range(1, k):
        sG, sH, cp, Gt, Ht = doubling_truncation_step(sG, sH, cp, op, eps)
    return sG, sH, cp, Gt, Ht, op


class TestInit:
    def test_scalar(self, scalar_problem):
        sG, sH, cp, Gt, Ht, _ = run_steps(scalar_problem, 1)
        assert_allclose(Ht.dense(), [[0.4137931034482759]], rtol=1e-14)
        assert_allclose(Gt.dense(), [[0.4137931034482759]], rtol=1e-14)
        assert sG.r == sH.r == 1
        assert cp.j == 1

    def test_degenerate(self):
        p = random_stable_problem(5, seed=0)
        for q in (CareProblem(p.A, p.B, np.zeros_like(p.C), gamma=p.gamma),
                  CareProblem(p.A, np.zeros_like(p.B), p.C, gamma=p.gamma)):
            with pytest.raises(DegenerateProblem):
                init_j1(q, build_shifted_operator(q), 0.0)

    def test_untruncated_matches_dense(self):
        p = random_stable_problem(15, 2, 1, seed=1)
        _, _, _, Gt, Ht, op = run_steps(p, 1)
        d = dsda_kernel_step(dsda_kernel_init(p, op), op)
        H, G, _ = dsda_evaluate(d, op)
        assert np.linalg.norm(Ht.dense() - H) <= 1e-13 * np.linalg.norm(H)
        assert np.linalg.norm(Gt.dense() - G) <= 1e-13 * np.linalg.norm(G)


class TestKernelAlgebra:
    def test_K1_identity_factors(self):
        S = np.array([[3.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        assert_allclose(compute_K1(np.eye(3), S, np.eye(2)), S)

    def test_K1_zero(self, rng):
        K = compute_K1(rng.standard_normal((3, 2)), np.zeros((3, 2)), rng.standard_normal((2, 2)))
        assert np.all(K == 0)

    def test_K1_shapes(self):
        with pytest.raises(DimensionMismatch):
            compute_K1(np.eye(2), np.zeros((3, 2)), np.eye(2))

    def _sides(self, rng, rG, rH, n=8):
        QG = np.linalg.qr(rng.standard_normal((n, rG)))[0]
        QH = np.linalg.qr(rng.standard_normal((n, rH)))[0]
        sG = SideState(QG, rng.uniform(0.5, 2, rG), np.eye(rG))
        sH = SideState(QH, rng.uniform(0.5, 2, rH), np.eye(rH))
        return sG, sH

    def test_L_zero_kernel(self, rng):
        sG, sH = self._sides(rng, 3, 2)
        cp = CouplingState(K=np.zeros((3, 2)), Uy=np.eye(3), Sy=np.ones(2), Vy=np.eye(2),
                           Omega=sG.Q.T @ sH.Q, j=1, gamma=0.7)
        LG, LH = compute_L(sG, sH, cp)
        assert np.all(LG == 0) and np.all(LH == 0)

    def test_L_zero_shift(self, rng):
        sG, sH = self._sides(rng, 3, 2)
        cp = CouplingState(K=rng.standard_normal((3, 2)), Uy=np.eye(3), Sy=np.ones(2),
                           Vy=np.eye(2), Omega=sG.Q.T @ sH.Q, j=1, gamma=0.0)
        LG, LH = compute_L(sG, sH, cp)
        assert np.all(LG == 0) and np.all(LH == 0)

    def test_L_shape_check(self, rng):
        sG, sH = self._sides(rng, 3, 2)
        cp = CouplingState(K=np.zeros((2, 2)), Uy=np.eye(2), Sy=np.ones(2), Vy=np.eye(2),
                           Omega=np.zeros((2, 2)), j=1, gamma=1.0)
        with pytest.raises(DimensionMismatch):
            compute_L(sG, sH, cp)

    def test_advance_zero_sigma(self, rng):
        # with Sigma = 0 only the off-diagonal blocks K V and U^T K survive
        K = rng.standard_normal((2, 3))
        U = np.linalg.qr(rng.standard_normal((2, 2)))[0]
        V = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        cp = CouplingState(K=K, Uy=U, Sy=np.zeros(2), Vy=V, Omega=np.zeros((2, 3)),
                           j=1, gamma=0.5)
        Z = advance_K(cp, np.eye(4), np.eye(6))
        assert_allclose(Z[:2, :3], 0, atol=1e-15)
        assert_allclose(Z[:2, 3:], K @ V)
        assert_allclose(Z[2:, :3], U.T @ K)
        assert_allclose(Z[2:, 3:], 0)

    def test_advance_shape_check(self):
        cp = CouplingState(K=np.zeros((2, 2)), Uy=np.eye(2), Sy=np.zeros(2), Vy=np.eye(2),
                           Omega=np.zeros((2, 2)), j=1, gamma=0.5)
        with pytest.raises(DimensionMismatch):
            advance_K(cp, np.eye(3), np.eye(4))


class TestStep:
    def test_scalar_iterates(self, scalar_problem):
        _, _, _, _, H2, _ = run_steps(scalar_problem, 2)
        assert_allclose(H2.dense(), [[0.4142131979695431]], rtol=1e-13)
        _, _, _, _, H3, _ = run_steps(scalar_problem, 3)
        assert abs(H3.dense()[0, 0] - SQRT2M1) < 1e-12

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), n=st.integers(6, 30), k=st.integers(2, 5))
    def test_untruncated_matches_kernel(self, seed, n, k):
        p = random_stable_problem(n, 2, 1, seed=seed)
        _, _, _, Gt, Ht, op = run_steps(p, k)
        d = dsda_kernel_init(p, op)
        for _ in range(k):
            d = dsda_kernel_step(d, op)
        H, G, _ = dsda_evaluate(d, op)
        assert np.linalg.norm(Ht.dense() - H) <= 1e-11 * np.linalg.norm(H)
        assert np.linalg.norm(Gt.dense() - G) <= 1e-11 * np.linalg.norm(G)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), eps=st.sampled_from([0.0, 1e-12, 1e-8, 1e-4]))
    def test_step_invariants(self, seed, eps):
        p = random_stable_problem(40, 2, 2, seed=seed)
        sG, sH, cp, Gt, Ht, op = run_steps(p, 1, eps)
        for j in range(1, 4):
            rG, rH = sG.r, sH.r
            before = op.solve_count
            sG, sH, cp, Gt, Ht = doubling_truncation_step(sG, sH, cp, op, eps)
            assert op.solve_count - before == 2 ** j * (rG + rH)
            assert sG.r <= 2 * rG and sH.r <= 2 * rH
            for s in (sG, sH):
                assert np.linalg.norm(s.Q.T @ s.Q - np.eye(s.r)) < 1e-12
                assert np.all(s.sigma1 > 0) and np.all(np.diff(s.sigma1) <= 0)
            assert cp.K.shape == (sG.r, sH.r)
            for M in (Gt.dense(), Ht.dense()):
                assert np.linalg.eigvalsh(M).min() >= -1e-13 * np.linalg.norm(M, 2)


class TestSolve:
    def test_scalar(self, scalar_problem):
        X, Y, rec = solve(scalar_problem)
        assert rec.termination == "Converged"
        assert rec.n_iter == 4
        assert_allclose(X.dense(), [[SQRT2M1]], rtol=1e-14)
        assert_allclose(Y.dense(), [[SQRT2M1]], rtol=1e-14)
        assert rec.rho_x[-1] <= 1e-13

    def test_against_oracle(self):
        p = random_stable_problem(200, 2, 2, seed=11)
        X, Y, rec = solve(p)
        assert rec.termination == "Converged"
        Xo = hamiltonian_care_oracle(p)
        Yo = hamiltonian_care_oracle(p.dual())
        assert np.linalg.norm(X.dense() - Xo) <= 1e-9 * np.linalg.norm(Xo)
        assert np.linalg.norm(Y.dense() - Yo) <= 1e-9 * np.linalg.norm(Yo)
        assert X.rank < 200

    def test_sparse_input(self):
        p = random_stable_problem(60, 1, 1, seed=12)
        ps = CareProblem(sp.csr_array(p.A), p.B, p.C, gamma=p.gamma)
        Xd, _, _ = solve(p)
        Xs, _, rec = solve(ps, SolverConfig(dense_threshold=10))
        assert rec.termination == "Converged"
        assert np.linalg.norm(Xs.dense() - Xd.dense()) <= 1e-11 * np.linalg.norm(Xd.dense())

    def test_max_iterations(self):
        X, _, rec = solve(random_stable_problem(30, seed=0), SolverConfig(max_iter=1))
        assert rec.termination == "MaxIterations"
        assert rec.n_iter == 1 and X.rank >= 1

    def test_no_dual(self):
        _, Y, rec = solve(random_stable_problem(20, seed=0), SolverConfig(compute_dual=False))
        assert Y is None and np.all(np.isnan(rec.rho_y))

    def test_weight_equals_folded(self, rng):
        p = random_stable_problem(30, 2, 1, seed=13)
        M = rng.standard_normal((2, 2))
        pw = CareProblem(p.A, p.B, p.C, R=M @ M.T + np.eye(2), gamma=p.gamma)
        Xw, _, _ = solve(pw)
        Xf, _, _ = solve(fold_weight(pw))
        assert_allclose(Xw.dense(), Xf.dense(), rtol=1e-12, atol=1e-14)
        Xo = hamiltonian_care_oracle(fold_weight(pw))
        assert np.linalg.norm(Xw.dense() - Xo) <= 1e-9 * np.linalg.norm(Xo)

    def test_callback_and_history(self):
        seen = []
        X, _, rec = solve(random_stable_problem(20, seed=2), SolverConfig(record_history=True),
                          callback=lambda j, sG, sH, cp: seen.append((j, sG.r, sH.r)))
        assert [s[0] for s in seen] == list(range(1, rec.n_iter + 1))
        assert len(rec.history) == rec.n_iter
        assert [it.rank_x for it in rec.iterations] == [s[2] for s in seen]

    def test_stops_on_bad_shift(self):
        # a wildly poor shift makes the Cayley map nearly non-contracting
        p = random_stable_problem(20, seed=3)
        X, _, rec = solve(p, SolverConfig(gamma=1e-8, max_iter=6))
        assert rec.termination in {"MaxIterations", "Diverged", "NearSingularPencil"}
        assert rec.n_iter <= 6


class TestConfig:
    def test_schedules(self):
        cfg = SolverConfig(trunc_tol=[1e-4, 1e-8], trunc_tol_g=1e-6)
        assert cfg.eps_h(1) == 1e-4 and cfg.eps_h(2) == 1e-8 and cfg.eps_h(7) == 1e-8
        assert cfg.eps_g(1) == cfg.eps_g(5) == 1e-6
        assert SolverConfig().eps_g(3) == 1e-15

    def test_env(self, monkeypatch):
        monkeypatch.setenv("SDACARE_DENSE_THRESHOLD", "7")
        assert SolverConfig.from_env().dense_threshold == 7
        assert SolverConfig.from_env(dense_threshold=3).dense_threshold == 3


class TestInvariants:
    @settings(max_examples=6, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), eps=st.sampled_from([1e-12, 1e-8, 1e-6, 1e-3]))
    def test_truncation_perturbation(self, seed, eps):
        from sdacare.reference import dense_dsda_t_trace
        tr = dense_dsda_t_trace(random_stable_problem(30, 2, 1, seed=seed), eps, 4)
        for s in tr.steps:
            for new, pre in ((s.H, s.H_pre), (s.G, s.G_pre)):
                assert np.linalg.norm(new - pre) <= eps * np.linalg.norm(pre) + 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_nonincreasing(self, seed):
        _, _, rec = solve(random_stable_problem(80, 2, 2, seed=seed))
        rho = rec.rho_x
        floor = 1e-14
        for a, b in zip(rho, rho[1:]):
            assert b <= a or max(a, b) <= 10 * floor
