"""Exception types raised across the package."""


class VmfaError(Exception):
    pass


class CholeskyFailure(VmfaError, ArithmeticError):
    """L_c = I + Lambda^T D^-1 Lambda is not positive definite, even after jitter."""


class EmptyKSet(VmfaError, ValueError):
    pass


class InsufficientCandidates(VmfaError, ValueError):
    pass


class SingularEc(VmfaError, ArithmeticError):
    pass


class DegenerateData(VmfaError, ValueError):
    pass


class MaxIterExceeded(VmfaError, RuntimeError):
    """Raised when an iteration cap is hit before convergence.

    ``result`` carries whatever the caller would have returned, so a partially
    trained model is never lost.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TargetUnreachable(MaxIterExceeded):
    pass


class TinyClusterWarning(UserWarning):
    """A k-means cell has fewer than two points; its factor analyzer falls back."""


class FormatError(VmfaError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass
