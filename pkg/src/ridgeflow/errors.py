"""Exception types shared across the package."""


class RidgeError(Exception):
    """Base class for recoverable numerical failures."""


class EigenGapTooSmall(RidgeError):
    """The gap between the k-th and (k+1)-th eigenvalue is below tolerance."""

    def __init__(self, gap, tol):
        self.gap = gap
        self.tol = tol
        super().__init__(f"eigengap {gap:.3e} below tolerance {tol:.1e}")


class DomainExit(RidgeError):
    """A point lies outside the region where the computation is valid."""
