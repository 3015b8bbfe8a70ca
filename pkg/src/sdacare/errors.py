"""Exception hierarchy shared by every module of the package."""


class SdaCareError(Exception):
    """Base class for all errors raised by :mod:`sdacare`."""

    #: short machine-readable tag used by the CLI metadata
    reason = "error"


class InputError(SdaCareError):
    """Problem data is malformed (shapes, ranks, weights)."""

    reason = "input"


class DimensionMismatch(InputError, ValueError):
    reason = "dimension_mismatch"


class RankDeficient(InputError):
    """``B`` or ``C^T`` does not have full column rank."""

    reason = "rank_deficient"

    def __init__(self, which, rank, expected):
        self.which = which
        self.rank = rank
        self.expected = expected
        super().__init__(f"{which} has numerical rank {rank}, expected {expected}")


class WeightNotSPD(InputError):
    reason = "weight_not_spd"


class ParseError(InputError):
    reason = "parse_error"


class NumericalError(SdaCareError):
    """A numerical breakdown during factorization or iteration."""

    reason = "numerical"


class SingularShift(NumericalError):
    """``A - gamma I`` is singular; choose a different shift."""

    reason = "singular_shift"


class SingularKGamma(NumericalError):
    """``A_gamma^T + H A_gamma^{-1} G`` is singular; choose a different shift."""

    reason = "singular_k_gamma"


class NearSingularPencil(NumericalError):
    """``I + G_k H_k`` (or a kernel of the truncated step) is numerically singular."""

    reason = "near_singular_pencil"


class MaxIterations(NumericalError):
    reason = "max_iterations"


class ImaginaryAxisEigenvalues(NumericalError):
    reason = "imaginary_axis_eigenvalues"


class SingularW1(NumericalError):
    reason = "singular_w1"


class KernelCapExceeded(NumericalError):
    reason = "kernel_cap_exceeded"


class DegenerateProblem(NumericalError):
    """``B = 0`` or ``C = 0``: one side of the doubling has no range."""

    reason = "degenerate_problem"


class KernelDegenerate(NumericalError):
    reason = "kernel_degenerate"


class SingularMatrix(NumericalError):
    reason = "singular_matrix"


class UnstableClosedLoop(NumericalError):
    reason = "unstable_closed_loop"


class ConditionsViolated(NumericalError):
    """Hypotheses of the DARE perturbation bound do not hold."""

    reason = "conditions_violated"

    def __init__(self, flags):
        self.flags = dict(flags)
        failed = ", ".join(k for k, ok in self.flags.items() if not ok)
        super().__init__(f"perturbation bound hypotheses violated: {failed}")


class TraceMissing(SdaCareError):
    reason = "trace_missing"


class InsufficientData(SdaCareError, ValueError):
    reason = "insufficient_data"


class CheckFailed(SdaCareError):
    reason = "check_failed"

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("failing checks: " + ", ".join(self.failures))
