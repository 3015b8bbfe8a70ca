import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from sdacare.care_core import CareProblem, build_shifted_operator, sda_seed
from sdacare.errors import (ImaginaryAxisEigenvalues, KernelCapExceeded,
                            NearSingularPencil)
from sdacare.reference import (SdaState, dense_dsda_t_trace, dsda_evaluate,
                               dsda_kernel_init, dsda_kernel_step,
                               hamiltonian_care_oracle, random_dare,
                               random_stable_problem, sda_solve_care,
                               sda_solve_dare, sda_step)

SQRT2M1 = np.sqrt(2.0) - 1.0


def care_residual(p, X):
    A = p.dense_A()
    return np.linalg.norm(A.T @ X + X @ A - X @ p.G @ X + p.H) / np.linalg.norm(X)


class TestSdaStep:
    def test_scalar(self):
        s = sda_step(SdaState(np.array([[0.2]]), np.array([[0.4]]), np.array([[0.4]])))
        w = 1.16
        assert_allclose(s.Ak, [[0.04 / w]])
        assert_allclose(s.Gk, [[0.4 + 0.016 / w]])
        assert_allclose(s.Hk, [[0.4 + 0.016 / w]])
        assert_allclose(s.Hk, [[0.4137931034482759]])
        assert s.k == 1

    def test_no_coupling_squares(self, rng):
        A = rng.standard_normal((5, 5))
        Z = np.zeros((5, 5))
        s = sda_step(SdaState(A, Z, Z))
        assert_allclose(s.Ak, A @ A)
        assert_allclose(s.Gk, 0)

    def test_near_singular(self):
        with pytest.raises(NearSingularPencil):
            sda_step(SdaState(np.eye(1), np.array([[1.0]]), np.array([[-1.0]])))


class TestClassicSolvers:
    def test_scalar_care(self, scalar_problem):
        X, Y, hist = sda_solve_care(scalar_problem)
        assert_allclose(X, [[SQRT2M1]], rtol=1e-14)
        assert_allclose(Y, [[SQRT2M1]], rtol=1e-14)
        assert_allclose(hist[2].Hk, [[0.4142131979695431]], rtol=1e-12)

    def test_no_output_weight(self):
        p = random_stable_problem(8, seed=0)
        p = CareProblem(p.A, p.B, np.zeros_like(p.C), gamma=p.gamma)
        X, _, _ = sda_solve_care(p)
        assert np.linalg.norm(X) == 0.0

    def test_no_input_is_lyapunov(self):
        p = random_stable_problem(10, 1, 2, seed=1)
        p = CareProblem(p.A, np.zeros_like(p.B), p.C, gamma=p.gamma)
        X, _, _ = sda_solve_care(p)
        Xl = sla.solve_continuous_lyapunov(p.A.T, -p.C.T @ p.C)
        assert_allclose(X, Xl, rtol=1e-11, atol=1e-13)

    def test_dare_examples(self):
        X, _, _ = sda_solve_dare(0.0, 1.0, 2.0)
        assert_allclose(X, [[2.0]])
        X, _, _ = sda_solve_dare(0.5, 0.0, 1.0)
        assert_allclose(X, [[4 / 3]], rtol=1e-14)

    def test_dare_fixed_point(self):
        A, G, H = random_dare(6, seed=3)
        X, _, _ = sda_solve_dare(A, G, H)
        F = A.T @ X @ np.linalg.solve(np.eye(6) + G @ X, A) + H
        assert_allclose(X, F, rtol=1e-12, atol=1e-13)

    def test_oracle_agrees(self):
        p = random_stable_problem(40, 2, 2, seed=4)
        X, Y, _ = sda_solve_care(p)
        Xo = hamiltonian_care_oracle(p)
        assert np.linalg.norm(X - Xo) <= 1e-11 * np.linalg.norm(Xo)
        Yo = hamiltonian_care_oracle(p.dual())
        assert np.linalg.norm(Y - Yo) <= 1e-11 * np.linalg.norm(Yo)


class TestOracle:
    def test_scalar(self, scalar_problem):
        X, info = hamiltonian_care_oracle(scalar_problem, full_output=True)
        assert_allclose(X, [[SQRT2M1]], rtol=1e-14)
        assert info["min_eig"] > 0

    def test_scipy_agreement(self):
        p = random_stable_problem(30, 2, 3, seed=5)
        Xs = sla.solve_continuous_are(p.A, p.B, p.C.T @ p.C, np.eye(2))
        X = hamiltonian_care_oracle(p)
        assert_allclose(X, Xs, rtol=1e-10, atol=1e-12)
        assert care_residual(p, X) < 1e-12

    def test_imaginary_axis(self):
        p = CareProblem(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.zeros((2, 1)), np.zeros((1, 2)))
        with pytest.raises(ImaginaryAxisEigenvalues):
            hamiltonian_care_oracle(p)


class TestKernel:
    def test_scalar_step(self, scalar_problem):
        op = build_shifted_operator(scalar_problem)
        d = dsda_kernel_step(dsda_kernel_init(scalar_problem, op), op)
        # Atilde = 1 + 2 / (-2) = 0
        assert_allclose(d.Ubreve, [[-0.5, 0.0]])
        assert_allclose(d.Yk, [[0.0, -0.5], [-0.5, 0.5]])
        H, G, A = dsda_evaluate(d, op)
        assert_allclose(H, [[0.75 / 1.8125]])
        assert_allclose(H, [[0.4137931034482759]])

    def test_structure(self):
        p = random_stable_problem(12, 2, 1, seed=6)
        op = build_shifted_operator(p)
        d = dsda_kernel_init(p, op)
        for k in range(1, 4):
            d = dsda_kernel_step(d, op)
            assert d.Ubreve.shape == (12, 2 ** k * 2)
            assert d.Yk.shape == (2 ** k * 2, 2 ** k * 1)
            assert_allclose(d.Tk, d.Ubreve.T @ d.Vbreve)

    def test_no_output(self):
        p = random_stable_problem(6, seed=0)
        p = CareProblem(p.A, p.B, np.zeros_like(p.C), gamma=p.gamma)
        op = build_shifted_operator(p)
        d = dsda_kernel_step(dsda_kernel_init(p, op), op)
        H, _, _ = dsda_evaluate(d, op)
        assert np.linalg.norm(H) == 0.0

    def test_cap(self):
        p = random_stable_problem(6, seed=0)
        op = build_shifted_operator(p)
        d = dsda_kernel_init(p, op)
        with pytest.raises(KernelCapExceeded):
            dsda_kernel_step(d, op, cap=1)

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(2, 30), seed=st.integers(0, 10 ** 6), k=st.integers(1, 6))
    def test_matches_classic(self, n, seed, k):
        p = random_stable_problem(n, 1, 1, seed=seed)
        op = build_shifted_operator(p)
        d = dsda_kernel_init(p, op)
        for _ in range(k):
            d = dsda_kernel_step(d, op)
        H, G, A = dsda_evaluate(d, op)
        seed0 = sda_seed(p, op)
        s = SdaState(seed0.A0, seed0.G0, seed0.H0)
        for _ in range(k):
            s = sda_step(s)
        sc = max(np.linalg.norm(s.Hk), 1.0)
        assert np.linalg.norm(H - s.Hk) <= 1e-10 * sc
        assert np.linalg.norm(G - s.Gk) <= 1e-10 * max(np.linalg.norm(s.Gk), 1.0)
        assert np.linalg.norm(A - s.Ak) <= 1e-10 * max(np.linalg.norm(A), 1.0) + 1e-12


class TestClassicIterates:
    def test_monotone_and_quadratic(self):
        p = random_stable_problem(25, 1, 1, seed=7)
        X, _, hist = sda_solve_care(p)
        for a, b in zip(hist, hist[1:]):
            assert np.linalg.eigvalsh(b.Hk - a.Hk).min() >= -1e-12 * np.linalg.norm(X)
        nA = [np.linalg.norm(s.Ak, 2) for s in hist]
        # A_{k+1} ~ A_k^2 once the iteration has settled
        for a, b in zip(nA[1:], nA[2:]):
            if a < 1e-3 and b > 1e-300:
                assert b <= 10 * a ** 2 + 1e-300


@pytest.fixture(scope="module")
def trace():
    return dense_dsda_t_trace(random_stable_problem(20, 1, 1, seed=8), 0.0, 4)


class TestTrace:
    def test_identities(self, trace):
        for s in trace.steps:
            assert s.identity_defect_G < 1e-12
            assert s.identity_defect_H < 1e-12
            scale = np.linalg.norm(s.A_trunc) + 1
            assert np.linalg.norm(s.A_short - s.A_trunc) < 1e-12 * scale
            assert_allclose(s.L_G, s.L_G_direct, atol=1e-12 * (np.linalg.norm(s.L_G_direct) + 1))
            assert_allclose(s.L_H, s.L_H_direct, atol=1e-12 * (np.linalg.norm(s.L_H_direct) + 1))

    def test_classic_agreement(self, trace):
        assert trace.k_max == 4
        for j in range(2, 5):
            assert trace[j].classic_defect < 1e-11

    def test_untruncated_matches_kernel(self, trace):
        p = random_stable_problem(20, 1, 1, seed=8)
        op = build_shifted_operator(p)
        d = dsda_kernel_init(p, op)
        for _ in range(4):
            d = dsda_kernel_step(d, op)
        H, G, _ = dsda_evaluate(d, op)
        assert np.linalg.norm(trace[4].H - H) <= 1e-12 * np.linalg.norm(H)
        assert np.linalg.norm(trace[4].G - G) <= 1e-12 * np.linalg.norm(G)

    def test_missing_step(self, trace):
        with pytest.raises(KeyError):
            trace[9]
