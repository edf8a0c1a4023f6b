"""Relative-change stopping rule shared by warm-up and the training loops."""


def check_convergence(F_prev, F_curr, epsilon, literal=False):
    """True when the free energy has stopped changing.

    By default this tests ``|F_curr - F_prev| / |F_prev| < epsilon``.  With
    ``literal=True`` the signed ratio ``(F_curr - F_prev) / F_prev < epsilon`` is
    used instead; for negative F that fires on any improvement.
    """
    if F_prev == 0:
        raise ValueError("relative change is undefined for F_prev == 0")
    if literal:
        return (F_curr - F_prev) / F_prev < epsilon
    return abs(F_curr - F_prev) / abs(F_prev) < epsilon
