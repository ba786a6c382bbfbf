"""Exception types shared across the package."""

from __future__ import annotations


class DbpiError(Exception):
    """Base class for all package errors."""


class InvalidEdgeError(DbpiError):
    """Edge has a self-loop or an endpoint outside [1..N]."""


class DisconnectedGraphError(DbpiError):
    """Communication graph is not connected."""


class AssumptionViolatedError(DbpiError):
    """A gauge-matrix assumption failed.

    ``which`` identifies the failed assumption:
      'a' symmetric positive semidefinite,
      'b' spectral radius below 2,
      'c' kernel equals the consensus subspace,
      'd' sparsity compatible with the communication graph.
    """

    def __init__(self, which: str, detail: str = ""):
        self.which = which
        self.detail = detail
        msg = f"gauge assumption '{which}' violated"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DimensionMismatchError(DbpiError):
    """Vector or matrix dimensions are inconsistent with the system."""


class NonSymmetricMatrixError(DbpiError):
    """A matrix required to be symmetric is not."""


class DivergedError(DbpiError):
    """Iterate norm exceeded the overflow guard.

    Carries the partial result produced before termination (``trajectory``
    for distributed drivers, ``xs`` for the centralized driver).
    """

    def __init__(self, msg: str, trajectory=None, xs=None):
        super().__init__(msg)
        self.trajectory = trajectory
        self.xs = xs


class NotFixedPointError(DbpiError):
    """Supplied point is not a fixed point of the average map."""


class ConditionsNotMetError(DbpiError):
    """Root conditions on (eta, beta) do not hold for this gauge."""


class NoPositiveAlphaError(DbpiError):
    """No positive step size keeps the reduced-map spectral radius below 1."""


class SlopeMismatchError(DbpiError):
    """Eigencurve slopes did not converge to the expected spectrum."""


class WindowTooShortError(DbpiError):
    """Too few usable points to fit a convergence rate."""


class InvalidConfigError(DbpiError):
    """Experiment configuration is malformed or inconsistent."""
